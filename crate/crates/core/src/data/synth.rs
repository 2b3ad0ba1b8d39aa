use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotation::{check_finding, Annotation, ANNOTATORS_PER_IMAGE};
use crate::error::{ensure, Error, Result};
use crate::geometry::{
    rasterize, BinaryMask, Landmarks, Point, RegionId, RegionLabelMap, RegionPartition, RegionSet,
};
use crate::model::LesionSize;
use crate::par;

/// What to draw in one synthetic case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub finding: String,
    pub lesion_size: LesionSize,
    /// Lesions are confined to these regions.
    pub target_regions: RegionSet,
    pub negative: bool,
}

/// Behaviour of the simulated annotators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorModel {
    /// Probability that an annotator marks a present lesion.
    pub sensitivity: f64,
    /// Probability of marking a lesion-free image.
    pub false_mark: f64,
    /// Probability of adding one extra, unaffected region to a mark.
    pub extra_region: f64,
}

impl Default for AnnotatorModel {
    fn default() -> Self {
        AnnotatorModel {
            sensitivity: 0.9,
            false_mark: 0.03,
            extra_region: 0.15,
        }
    }
}

/// A rendered image with its ground truth and simulated annotations.
#[derive(Clone, Debug)]
pub struct SyntheticCase {
    pub id: String,
    pub image: RgbImage,
    pub landmarks: Landmarks,
    pub finding: String,
    /// Pixels covered by the lesion, at image resolution.
    pub lesion_mask: BinaryMask,
    /// Regions that actually contain lesion pixels.
    pub lesion_regions: RegionSet,
    pub annotations: Vec<Annotation>,
}

/// Blob radius range in pixels at 256 px input, scaled linearly with size.
fn radius_range(size: LesionSize) -> (f64, f64) {
    match size {
        LesionSize::Small => (2.0, 6.0),
        LesionSize::Medium => (8.0, 16.0),
        LesionSize::Large => (24.0, 36.0),
    }
}

fn blob_count<R: Rng>(size: LesionSize, rng: &mut R) -> usize {
    match size {
        LesionSize::Small => rng.random_range(3..=6),
        LesionSize::Medium => rng.random_range(1..=3),
        LesionSize::Large => 1,
    }
}

fn finding_color(finding: &str) -> [f64; 3] {
    match finding {
        "hemorrhage" => [0.38, 0.04, 0.02],
        "hard exudate" => [0.98, 0.92, 0.45],
        "drusen" => [0.92, 0.80, 0.40],
        "cotton wool patch" => [0.95, 0.93, 0.85],
        "macular hole" => [0.30, 0.08, 0.05],
        "membrane" => [0.85, 0.75, 0.70],
        "RNFL defect" => [0.45, 0.15, 0.08],
        _ => [0.20, 0.12, 0.08],
    }
}

/// Random but plausible landmark placement for a `size x size` image:
/// either eye, disc-fovea distance 35-45% of the width.
pub fn random_landmarks<R: Rng>(rng: &mut R, size: usize) -> Result<Landmarks> {
    let s = size as f64;
    let d = rng.random_range(0.35..0.45) * s;
    let left_eye = rng.random_bool(0.5);
    let cx = s / 2.0 + rng.random_range(-0.03..0.03) * s;
    let cy = s / 2.0 + rng.random_range(-0.04..0.04) * s;
    let tilt: f64 = rng.random_range(-0.15..0.15);
    let half = Point::new(tilt.cos(), tilt.sin()).scale(d / 2.0);
    let (od, fovea) = if left_eye {
        (Point::new(cx, cy).sub(half), Point::new(cx, cy).add(half))
    } else {
        (Point::new(cx, cy).add(half), Point::new(cx, cy).sub(half))
    };
    Landmarks::new(od, fovea, size, size)
}

struct Canvas {
    size: usize,
    rgb: Vec<[f64; 3]>,
}

impl Canvas {
    fn blend(&mut self, i: usize, color: [f64; 3], alpha: f64) {
        let px = &mut self.rgb[i];
        for c in 0..3 {
            px[c] = px[c] * (1.0 - alpha) + color[c] * alpha;
        }
    }

    fn centre(&self, i: usize) -> Point {
        Point::new((i % self.size) as f64 + 0.5, (i / self.size) as f64 + 0.5)
    }
}

fn quad_bezier(p0: Point, p1: Point, p2: Point, t: f64) -> Point {
    let u = 1.0 - t;
    p0.scale(u * u).add(p1.scale(2.0 * u * t)).add(p2.scale(t * t))
}

fn render_background<R: Rng>(rng: &mut R, lm: &Landmarks) -> Canvas {
    let size = lm.width;
    let s = size as f64;
    let d = lm.optic_disc.dist(lm.fovea);
    let base = [
        rng.random_range(0.70..0.80),
        rng.random_range(0.30..0.38),
        rng.random_range(0.12..0.18),
    ];
    let grad = Point::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let centre = Point::new(s / 2.0, s / 2.0);
    let mut canvas = Canvas {
        size,
        rgb: vec![[0.0; 3]; size * size],
    };
    let disc_r = 0.2 * d;
    let macula_sigma = 0.18 * d;
    for i in 0..size * size {
        let p = canvas.centre(i);
        let rel = p.sub(centre).scale(1.0 / s);
        let r = rel.norm() * 2.0;
        if r > 1.0 {
            continue;
        }
        let shade = (1.0 + grad.dot(rel)) * (1.0 - 0.35 * r * r);
        let mut px = [base[0] * shade, base[1] * shade, base[2] * shade];
        let dm = p.dist(lm.fovea) / macula_sigma;
        let dark = 0.45 * (-0.5 * dm * dm).exp();
        for v in &mut px {
            *v *= 1.0 - dark;
        }
        canvas.rgb[i] = px;
        let dd = p.dist(lm.optic_disc);
        let disc_alpha = ((disc_r + 0.5 - dd) / (0.15 * disc_r + 1.0)).clamp(0.0, 1.0);
        if disc_alpha > 0.0 {
            canvas.blend(i, [0.98, 0.90, 0.62], 0.9 * disc_alpha);
        }
    }
    canvas
}

fn render_vessels<R: Rng>(rng: &mut R, canvas: &mut Canvas, lm: &Landmarks) {
    let size = canvas.size;
    let d = lm.optic_disc.dist(lm.fovea);
    let u = lm.fovea.sub(lm.optic_disc).scale(1.0 / d);
    let n = Point::new(-u.y, u.x);
    let width = (size as f64 / 170.0).max(0.6);
    let mut darkness = vec![0.0f64; size * size];
    // temporal arcades around the macula, then nasal branches
    let shapes = [
        (0.3, 0.8, 1.6, 0.9),
        (0.3, -0.8, 1.6, -0.9),
        (0.6, 0.3, 1.2, 0.35),
        (0.6, -0.3, 1.2, -0.35),
        (-0.3, 0.5, -0.8, 0.7),
        (-0.3, -0.5, -0.8, -0.7),
    ];
    for &(cu, cn, eu, en) in &shapes {
        let jitter = |rng: &mut R, v: f64| v + rng.random_range(-0.1..0.1);
        let ctrl = lm
            .optic_disc
            .add(u.scale(jitter(rng, cu) * d))
            .add(n.scale(jitter(rng, cn) * d));
        let end = lm
            .optic_disc
            .add(u.scale(jitter(rng, eu) * d))
            .add(n.scale(jitter(rng, en) * d));
        let w = width * rng.random_range(0.8..1.3);
        let steps = (3.0 * d) as usize + 8;
        let reach = (2.5 * w).ceil() as isize + 1;
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            let c = quad_bezier(lm.optic_disc, ctrl, end, t);
            let taper = 1.0 - 0.5 * t;
            let (px, py) = (c.x.floor() as isize, c.y.floor() as isize);
            for y in py - reach..=py + reach {
                for x in px - reach..=px + reach {
                    if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
                        continue;
                    }
                    let i = y as usize * size + x as usize;
                    let dist = canvas.centre(i).dist(c) / (w * taper);
                    let v = (-dist * dist).exp();
                    if v > darkness[i] {
                        darkness[i] = v;
                    }
                }
            }
        }
    }
    for (i, &v) in darkness.iter().enumerate() {
        if v > 1e-3 && canvas.rgb[i] != [0.0; 3] {
            canvas.blend(i, [0.42, 0.05, 0.04], 0.6 * v);
        }
    }
}

/// Place lesion blobs inside `targets`; returns the footprint mask.
fn render_lesions<R: Rng>(
    rng: &mut R,
    canvas: &mut Canvas,
    labels: &RegionLabelMap,
    spec: &CaseSpec,
) -> Result<BinaryMask> {
    let size = canvas.size;
    let scale = size as f64 / 256.0;
    let (rlo, rhi) = radius_range(spec.lesion_size);
    let (rlo, rhi) = (rlo * scale, rhi * scale);
    let candidates: Vec<usize> = (0..size * size)
        .filter(|&i| spec.target_regions.contains_label(labels.labels[i]) && canvas.rgb[i] != [0.0; 3])
        .collect();
    let mut mask = BinaryMask::filled(size, size, false);
    let color = finding_color(&spec.finding);
    let diffuse = spec.lesion_size == LesionSize::Large;
    let count = blob_count(spec.lesion_size, rng);
    const ATTEMPTS: usize = 400;
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..ATTEMPTS {
            if candidates.is_empty() {
                break;
            }
            let radius = rng.random_range(rlo..=rhi);
            let centre = canvas.centre(candidates[rng.random_range(0..candidates.len())]);
            let jitter = Point::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let centre = centre.add(jitter);
            let reach = radius + 0.5;
            let x0 = (centre.x - reach).floor().max(0.0) as usize;
            let y0 = (centre.y - reach).floor().max(0.0) as usize;
            let x1 = ((centre.x + reach).ceil() as usize).min(size);
            let y1 = ((centre.y + reach).ceil() as usize).min(size);
            let mut footprint = Vec::new();
            let mut ok = true;
            'scan: for y in y0..y1 {
                for x in x0..x1 {
                    let i = y * size + x;
                    let dist = canvas.centre(i).dist(centre);
                    if dist < reach {
                        if !spec.target_regions.contains_label(labels.labels[i])
                            || canvas.rgb[i] == [0.0; 3]
                        {
                            ok = false;
                            break 'scan;
                        }
                        footprint.push((i, dist));
                    }
                }
            }
            if !ok || footprint.is_empty() {
                continue;
            }
            for (i, dist) in footprint {
                let edge = (reach - dist).clamp(0.0, 1.0);
                let alpha = if diffuse {
                    0.55 * edge * (1.0 - (dist / reach).powi(2)).max(0.2)
                } else {
                    0.9 * edge
                };
                canvas.blend(i, color, alpha);
                mask.cells[i] = 1;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::contract(format!(
                "infeasible placement: no room for a {} lesion inside regions {:?} at {}x{}",
                spec.lesion_size.as_str(),
                spec.target_regions,
                size,
                size
            )));
        }
    }
    Ok(mask)
}

fn simulate_annotators<R: Rng>(
    rng: &mut R,
    id: &str,
    finding: &str,
    lesion_regions: RegionSet,
    model: &AnnotatorModel,
) -> Vec<Annotation> {
    (0..ANNOTATORS_PER_IMAGE)
        .map(|k| {
            let ann = Annotation::normal(id, format!("annotator{}", k + 1));
            let mut regions = if lesion_regions.is_empty() {
                if !rng.random_bool(model.false_mark) {
                    return ann;
                }
                RegionSet::EMPTY.with(random_region(rng))
            } else {
                if !rng.random_bool(model.sensitivity) {
                    return ann;
                }
                lesion_regions
            };
            if rng.random_bool(model.extra_region) {
                regions = regions.with(random_region(rng));
            }
            ann.with_finding(finding, regions)
        })
        .collect()
}

fn random_region<R: Rng>(rng: &mut R) -> RegionId {
    RegionId::new(rng.random_range(1..=8)).expect("1..=8 is a region")
}

/// Render one case; deterministic in `seed`.
pub fn generate_case(
    seed: u64,
    id: &str,
    size: usize,
    spec: &CaseSpec,
    annotators: &AnnotatorModel,
) -> Result<SyntheticCase> {
    check_finding(&spec.finding)?;
    ensure!(size >= 16, "synthetic images must be at least 16 px, got {size}");
    ensure!(
        spec.negative || !spec.target_regions.is_empty(),
        "a positive case needs at least one target region"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lm = random_landmarks(&mut rng, size)?;
    let partition = RegionPartition::derive(lm)?;
    let labels = rasterize(&partition, size, size)?;
    let mut canvas = render_background(&mut rng, &lm);
    render_vessels(&mut rng, &mut canvas, &lm);
    let lesion_mask = if spec.negative {
        BinaryMask::filled(size, size, false)
    } else {
        render_lesions(&mut rng, &mut canvas, &labels, spec)?
    };
    let noise = Normal::new(0.0, 0.012).expect("valid sigma");
    let mut image = RgbImage::new(size as u32, size as u32);
    for (i, px) in canvas.rgb.iter().enumerate() {
        let inside = *px != [0.0; 3];
        let out = image.get_pixel_mut((i % size) as u32, (i / size) as u32);
        for c in 0..3 {
            let v = if inside {
                px[c] + noise.sample(&mut rng)
            } else {
                0.0
            };
            out[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let mut lesion_regions = RegionSet::EMPTY;
    for (i, &m) in lesion_mask.cells.iter().enumerate() {
        if m != 0 {
            lesion_regions = lesion_regions.with(RegionId::new(labels.labels[i])?);
        }
    }
    let annotations = simulate_annotators(&mut rng, id, &spec.finding, lesion_regions, annotators);
    Ok(SyntheticCase {
        id: id.to_string(),
        image,
        landmarks: lm,
        finding: spec.finding.clone(),
        lesion_mask,
        lesion_regions,
        annotations,
    })
}

/// Recipe for a whole synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub count: usize,
    pub input_size: usize,
    pub finding: String,
    pub lesion_size: LesionSize,
    pub positive_fraction: f64,
    /// Each positive case draws one of these regions as its target.
    pub target_regions: Vec<u8>,
    pub seed: u64,
    pub annotators: AnnotatorModel,
    /// Prefix for generated image ids.
    pub id_prefix: String,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            count: 200,
            input_size: 64,
            finding: "hemorrhage".into(),
            lesion_size: LesionSize::Medium,
            positive_fraction: 0.5,
            target_regions: vec![3, 4, 5, 6, 7, 8],
            seed: 0,
            annotators: AnnotatorModel::default(),
            id_prefix: "case".into(),
        }
    }
}

/// Independent stream per case index.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generate `spec.count` cases in parallel; output order and content depend
/// only on the spec.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<SyntheticCase>> {
    ensure!(spec.count > 0, "corpus count must be positive");
    ensure!(
        (0.0..=1.0).contains(&spec.positive_fraction),
        "positive_fraction must lie in [0, 1]"
    );
    let targets = RegionSet::from_raw(&spec.target_regions)?;
    ensure!(!targets.is_empty(), "target_regions must not be empty");
    let choices: Vec<RegionId> = targets.iter().collect();
    let results = par::map_range(spec.count, |i| {
        let seed = case_seed(spec.seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let negative = !rng.random_bool(spec.positive_fraction);
        let start = rng.random_range(0..choices.len());
        let id = format!("{}{:05}", spec.id_prefix, i);
        // Fall through the target list when a region is too small.
        let mut last = None;
        for k in 0..choices.len() {
            let case = CaseSpec {
                finding: spec.finding.clone(),
                lesion_size: spec.lesion_size,
                target_regions: RegionSet::EMPTY.with(choices[(start + k) % choices.len()]),
                negative,
            };
            match generate_case(seed, &id, spec.input_size, &case, &spec.annotators) {
                Ok(c) => return Ok(c),
                Err(e) => last = Some(e),
            }
            if negative {
                break;
            }
        }
        Err(last.expect("at least one attempt"))
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(regions: &[u8], negative: bool) -> CaseSpec {
        CaseSpec {
            finding: "hemorrhage".into(),
            lesion_size: LesionSize::Medium,
            target_regions: RegionSet::from_raw(regions).unwrap(),
            negative,
        }
    }

    #[test]
    fn same_seed_same_image() {
        let a = generate_case(3, "x", 64, &spec(&[5], false), &AnnotatorModel::default()).unwrap();
        let b = generate_case(3, "x", 64, &spec(&[5], false), &AnnotatorModel::default()).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.annotations, b.annotations);
    }

    #[test]
    fn lesion_pixels_stay_in_target_region() {
        for seed in 0..10 {
            let c = generate_case(seed, "x", 64, &spec(&[5], false), &AnnotatorModel::default())
                .unwrap();
            let labels =
                rasterize(&RegionPartition::derive(c.landmarks).unwrap(), 64, 64).unwrap();
            assert!(c.lesion_mask.count() > 0);
            for (i, &m) in c.lesion_mask.cells.iter().enumerate() {
                if m != 0 {
                    assert_eq!(labels.labels[i], 5);
                }
            }
            assert_eq!(c.lesion_regions, RegionSet::from_raw(&[5]).unwrap());
        }
    }

    #[test]
    fn negatives_have_no_lesion() {
        let c = generate_case(1, "x", 64, &spec(&[5], true), &AnnotatorModel::default()).unwrap();
        assert_eq!(c.lesion_mask.count(), 0);
        assert!(c.lesion_regions.is_empty());
    }

    #[test]
    fn large_lesion_in_disc_half_is_infeasible() {
        let s = CaseSpec {
            lesion_size: LesionSize::Large,
            ..spec(&[1], false)
        };
        let err = generate_case(0, "x", 64, &s, &AnnotatorModel::default()).unwrap_err();
        assert!(err.to_string().contains("infeasible placement"), "{err}");
    }

    #[test]
    fn perfect_annotators_mark_exactly_the_lesion_regions() {
        let model = AnnotatorModel {
            sensitivity: 1.0,
            false_mark: 0.0,
            extra_region: 0.0,
        };
        let c = generate_case(2, "x", 64, &spec(&[6], false), &model).unwrap();
        assert_eq!(c.annotations.len(), 3);
        for a in &c.annotations {
            assert_eq!(a.marks("hemorrhage"), Some(c.lesion_regions));
        }
    }

    #[test]
    fn corpus_is_reproducible_and_mixed() {
        let spec = CorpusSpec {
            count: 24,
            ..Default::default()
        };
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.image == y.image && x.id == y.id));
        let pos = a.iter().filter(|c| !c.lesion_regions.is_empty()).count();
        assert!(pos > 0 && pos < 24);
    }
}
