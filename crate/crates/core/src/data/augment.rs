use rand::Rng;
use serde::{Deserialize, Serialize};

use super::preprocess::dims3;
use crate::error::{ensure, Result};
use crate::geometry::{Landmarks, Point};
use crate::tensor::Tensor;

/// One draw of augmentation parameters. Geometry is applied about the image
/// centre: flips, then scale, then shear, then rotation, then translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub scale: f64,
    /// Radians; positive turns clockwise on screen (y points down).
    pub rotation: f64,
    /// Fractions of width and height.
    pub translation: (f64, f64),
    pub shear: f64,
    pub intensity_scale: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            flip_h: false,
            flip_v: false,
            scale: 1.0,
            rotation: 0.0,
            translation: (0.0, 0.0),
            shear: 0.0,
            intensity_scale: 1.0,
        }
    }
}

/// Sampling ranges for [`AugmentParams`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub flip_probability: f64,
    pub rotation_degrees: f64,
    pub scale: (f64, f64),
    pub translation: f64,
    pub shear: f64,
    pub intensity: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPolicy {
    None,
    /// Flips and small translations only, so regions map onto regions.
    RegionPreserving,
    /// Full affine range with cue masks recomputed from moved landmarks.
    Full,
}

impl AugmentPolicy {
    pub fn ranges(self) -> Option<AugmentRanges> {
        match self {
            AugmentPolicy::None => None,
            AugmentPolicy::RegionPreserving => Some(AugmentRanges {
                flip_probability: 0.5,
                rotation_degrees: 0.0,
                scale: (1.0, 1.0),
                translation: 0.02,
                shear: 0.0,
                intensity: (0.8, 1.2),
            }),
            AugmentPolicy::Full => Some(AugmentRanges {
                flip_probability: 0.5,
                rotation_degrees: 30.0,
                scale: (0.9, 1.1),
                translation: 0.05,
                shear: 0.1,
                intensity: (0.8, 1.2),
            }),
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

impl AugmentParams {
    pub fn sample<R: Rng>(rng: &mut R, r: &AugmentRanges) -> Self {
        let t = r.translation;
        let rot = r.rotation_degrees.to_radians();
        AugmentParams {
            flip_h: rng.random_bool(r.flip_probability),
            flip_v: rng.random_bool(r.flip_probability),
            scale: uniform(rng, r.scale.0, r.scale.1),
            rotation: uniform(rng, -rot, rot),
            translation: (uniform(rng, -t, t), uniform(rng, -t, t)),
            shear: uniform(rng, -r.shear, r.shear),
            intensity_scale: uniform(rng, r.intensity.0, r.intensity.1),
        }
    }

    /// Linear part of the forward map, row-major 2x2.
    fn linear(&self) -> [f64; 4] {
        let fx = if self.flip_h { -1.0 } else { 1.0 };
        let fy = if self.flip_v { -1.0 } else { 1.0 };
        let s = self.scale;
        // shear * scale * flip
        let a = [s * fx, self.shear * s * fy, 0.0, s * fy];
        let (sn, cs) = self.rotation.sin_cos();
        let r = [cs, -sn, sn, cs];
        [
            r[0] * a[0] + r[1] * a[2],
            r[0] * a[1] + r[1] * a[3],
            r[2] * a[0] + r[3] * a[2],
            r[2] * a[1] + r[3] * a[3],
        ]
    }

    fn check(&self) -> Result<[f64; 4]> {
        ensure!(
            self.intensity_scale.is_finite() && self.intensity_scale >= 0.0,
            "intensity scale must be finite and non-negative, got {}",
            self.intensity_scale
        );
        let m = self.linear();
        let det = m[0] * m[3] - m[1] * m[2];
        ensure!(
            det.is_finite() && det.abs() > 1e-12 && m.iter().all(|v| v.is_finite()),
            "affine map is not invertible (determinant {det})"
        );
        ensure!(
            self.translation.0.is_finite() && self.translation.1.is_finite(),
            "translation must be finite"
        );
        Ok(m)
    }

    /// Forward map of a point in continuous pixel coordinates.
    pub fn map_point(&self, p: Point, width: usize, height: usize) -> Result<Point> {
        let m = self.check()?;
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let (dx, dy) = (p.x - cx, p.y - cy);
        Ok(Point::new(
            m[0] * dx + m[1] * dy + cx + self.translation.0 * width as f64,
            m[2] * dx + m[3] * dy + cy + self.translation.1 * height as f64,
        ))
    }

    pub fn map_landmarks(&self, lm: &Landmarks) -> Result<Landmarks> {
        Landmarks::new(
            self.map_point(lm.optic_disc, lm.width, lm.height)?,
            self.map_point(lm.fovea, lm.width, lm.height)?,
            lm.width,
            lm.height,
        )
    }
}

/// Apply `params` to a `[C,H,W]` image in `[0,1]`: inverse-mapped bilinear
/// sampling with zero fill, then intensity scaling and clamping.
pub fn augment(image: &Tensor, params: &AugmentParams) -> Result<Tensor> {
    let (c, h, w) = dims3(image)?;
    let m = params.check()?;
    if cfg!(debug_assertions) {
        ensure!(
            image.data().iter().all(|v| (0.0..=1.0).contains(v)),
            "augment input must lie in [0, 1]"
        );
    }
    let det = m[0] * m[3] - m[1] * m[2];
    let inv = [m[3] / det, -m[1] / det, -m[2] / det, m[0] / det];
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (tx, ty) = (params.translation.0 * w as f64, params.translation.1 * h as f64);
    let src = image.data();
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx - tx;
            let dy = y as f64 + 0.5 - cy - ty;
            // source position in pixel-index coordinates
            let sx = inv[0] * dx + inv[1] * dy + cx - 0.5;
            let sy = inv[2] * dx + inv[3] * dy + cy - 0.5;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let mut v = 0.0;
                for &(tx_, ty_, wt) in &taps {
                    if wt != 0.0 && tx_ >= 0.0 && ty_ >= 0.0 && tx_ < w as f64 && ty_ < h as f64 {
                        v += wt * plane[ty_ as usize * w + tx_ as usize];
                    }
                }
                out[ch * h * w + y * w + x] = (v * params.intensity_scale).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![3, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn identity_is_exact() {
        let t = random_image(1, 9, 7);
        assert_eq!(augment(&t, &AugmentParams::default()).unwrap(), t);
    }

    #[test]
    fn double_horizontal_flip_is_identity() {
        let t = random_image(2, 8, 11);
        let p = AugmentParams {
            flip_h: true,
            ..Default::default()
        };
        let once = augment(&t, &p).unwrap();
        assert_ne!(once, t);
        assert_eq!(augment(&once, &p).unwrap(), t);
    }

    #[test]
    fn quarter_turn_permutes_two_by_two() {
        // a b      c a
        // c d  ->  d b   (clockwise on screen)
        let t = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = AugmentParams {
            rotation: std::f64::consts::FRAC_PI_2,
            ..Default::default()
        };
        let r = augment(&t, &p).unwrap();
        let expect = [0.3, 0.1, 0.4, 0.2];
        for (a, b) in r.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", r.data());
        }
    }

    #[test]
    fn zero_scale_rejected() {
        let t = random_image(3, 4, 4);
        let p = AugmentParams {
            scale: 0.0,
            ..Default::default()
        };
        assert!(augment(&t, &p).is_err());
    }

    #[test]
    fn sampled_output_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ranges = AugmentPolicy::Full.ranges().unwrap();
        let t = random_image(5, 16, 16);
        for _ in 0..20 {
            let p = AugmentParams::sample(&mut rng, &ranges);
            let out = augment(&t, &p).unwrap();
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn landmarks_move_with_pixels() {
        // a single bright pixel moves where its centre point maps
        let mut t = Tensor::zeros(vec![1, 10, 10]);
        t.data_mut()[2 * 10 + 3] = 1.0;
        let p = AugmentParams {
            flip_h: true,
            translation: (0.1, 0.2),
            ..Default::default()
        };
        let out = augment(&t, &p).unwrap();
        let q = p.map_point(Point::new(3.5, 2.5), 10, 10).unwrap();
        let idx = (q.y - 0.5) as usize * 10 + (q.x - 0.5) as usize;
        assert!((out.data()[idx] - 1.0).abs() < 1e-12);
    }
}
