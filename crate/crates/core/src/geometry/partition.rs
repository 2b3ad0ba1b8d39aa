use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Point) -> f64 {
        self.sub(o).norm()
    }
}

/// Region label in `1..=8`.
///
/// | id | region |
/// |----|--------|
/// | 1 | superior half of the disc circle |
/// | 2 | inferior half of the disc circle |
/// | 3 | macula (fovea circle outside the disc circle) |
/// | 4 | temporal strip beyond the fovea between the tangents |
/// | 5 | superior temporal |
/// | 6 | inferior temporal |
/// | 7 | superior nasal |
/// | 8 | inferior nasal |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct RegionId(u8);

impl RegionId {
    pub const SUPERIOR_DISC: RegionId = RegionId(1);
    pub const INFERIOR_DISC: RegionId = RegionId(2);
    pub const MACULA: RegionId = RegionId(3);
    pub const TEMPORAL_CENTRAL: RegionId = RegionId(4);
    pub const SUPERIOR_TEMPORAL: RegionId = RegionId(5);
    pub const INFERIOR_TEMPORAL: RegionId = RegionId(6);
    pub const SUPERIOR_NASAL: RegionId = RegionId(7);
    pub const INFERIOR_NASAL: RegionId = RegionId(8);

    pub fn new(id: u8) -> Result<Self> {
        ensure!((1..=8).contains(&id), "region id {} outside 1..=8", id);
        Ok(RegionId(id))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = RegionId> {
        (1..=8).map(RegionId)
    }
}

impl TryFrom<u8> for RegionId {
    type Error = crate::error::Error;
    fn try_from(v: u8) -> Result<Self> {
        RegionId::new(v)
    }
}

impl From<RegionId> for u8 {
    fn from(r: RegionId) -> u8 {
        r.0
    }
}

/// Optic disc and fovea centres in pixel coordinates (x right, y down).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    pub optic_disc: Point,
    pub fovea: Point,
    pub width: usize,
    pub height: usize,
}

impl Landmarks {
    pub fn new(optic_disc: Point, fovea: Point, width: usize, height: usize) -> Result<Self> {
        let l = Landmarks {
            optic_disc,
            fovea,
            width,
            height,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.width > 0 && self.height > 0, "image size must be positive");
        for (name, p) in [("optic disc", self.optic_disc), ("fovea", self.fovea)] {
            ensure!(
                p.x.is_finite()
                    && p.y.is_finite()
                    && (0.0..=self.width as f64).contains(&p.x)
                    && (0.0..=self.height as f64).contains(&p.y),
                "{} ({}, {}) lies outside the {}x{} image",
                name,
                p.x,
                p.y,
                self.width,
                self.height
            );
        }
        ensure!(
            self.optic_disc.dist(self.fovea) > 0.0,
            "optic disc and fovea coincide at ({}, {})",
            self.optic_disc.x,
            self.optic_disc.y
        );
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: Point,
    pub radius: f64,
}

impl Circle {
    pub fn contains(&self, p: Point) -> bool {
        p.sub(self.center).dot(p.sub(self.center)) < self.radius * self.radius
    }
}

/// A line (or half-line, when `half` is set) through `origin` along `dir`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub origin: Point,
    /// Unit direction.
    pub dir: Point,
    pub half: bool,
}

/// Analytic elements of the partition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub landmarks: Landmarks,
    pub distance: f64,
    pub disc_circle: Circle,
    pub fovea_circle: Circle,
    /// Endpoints of the common chord of the two circles.
    pub chord: [Point; 2],
    /// Half-line from the disc through the fovea.
    pub axis: Line,
    /// Unit normal of the axis pointing toward the superior side (up in
    /// the image).
    pub superior_normal: Point,
    /// Half-lines tangent to the fovea circle, parallel to the axis, heading
    /// away from the disc: `[superior, inferior]`.
    pub tangents: [Line; 2],
    /// Line through the disc centre perpendicular to the axis.
    pub perpendicular: Line,
}

pub const DISC_RADIUS_RATIO: f64 = 2.0 / 5.0;
pub const FOVEA_RADIUS_RATIO: f64 = 2.0 / 3.0;

impl RegionPartition {
    pub fn derive(landmarks: Landmarks) -> Result<Self> {
        landmarks.validate()?;
        let od = landmarks.optic_disc;
        let fv = landmarks.fovea;
        let d = od.dist(fv);
        let u = fv.sub(od).scale(1.0 / d);
        let r1 = DISC_RADIUS_RATIO * d;
        let r2 = FOVEA_RADIUS_RATIO * d;

        // Image y grows downward, so "up" is the normal with negative y.
        let mut n = Point::new(-u.y, u.x);
        if n.y > 0.0 || (n.y == 0.0 && n.x > 0.0) {
            n = n.scale(-1.0);
        }

        // Radical line: distance a from the disc centre along the axis.
        let a = (d * d + r1 * r1 - r2 * r2) / (2.0 * d);
        let h = (r1 * r1 - a * a).sqrt();
        let foot = od.add(u.scale(a));
        let chord = [foot.add(n.scale(h)), foot.sub(n.scale(h))];

        let tangents = [
            Line {
                origin: fv.add(n.scale(r2)),
                dir: u,
                half: true,
            },
            Line {
                origin: fv.sub(n.scale(r2)),
                dir: u,
                half: true,
            },
        ];

        Ok(RegionPartition {
            landmarks,
            distance: d,
            disc_circle: Circle {
                center: od,
                radius: r1,
            },
            fovea_circle: Circle {
                center: fv,
                radius: r2,
            },
            chord,
            axis: Line {
                origin: od,
                dir: u,
                half: true,
            },
            superior_normal: n,
            tangents,
            perpendicular: Line {
                origin: od,
                dir: n,
                half: false,
            },
        })
    }

    /// Coordinates of `p` in the axis frame: `(along, across)` where
    /// `along` runs disc→fovea and `across` is positive on the superior side.
    pub fn frame(&self, p: Point) -> (f64, f64) {
        let v = p.sub(self.landmarks.optic_disc);
        (v.dot(self.axis.dir), v.dot(self.superior_normal))
    }

    /// Region of a point. Clauses are tried in order, first match wins.
    pub fn label(&self, p: Point) -> RegionId {
        let (t, s) = self.frame(p);
        let superior = s > 0.0;
        if self.disc_circle.contains(p) {
            return if superior {
                RegionId::SUPERIOR_DISC
            } else {
                RegionId::INFERIOR_DISC
            };
        }
        if self.fovea_circle.contains(p) {
            return RegionId::MACULA;
        }
        if t > self.distance && s.abs() < self.fovea_circle.radius {
            return RegionId::TEMPORAL_CENTRAL;
        }
        match (t > 0.0, superior) {
            (true, true) => RegionId::SUPERIOR_TEMPORAL,
            (true, false) => RegionId::INFERIOR_TEMPORAL,
            (false, true) => RegionId::SUPERIOR_NASAL,
            (false, false) => RegionId::INFERIOR_NASAL,
        }
    }
}
