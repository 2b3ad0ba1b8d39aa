use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotation::{consensus, read_annotations, write_annotations, ConsensusRule, Verdict};
use super::preprocess::preprocess;
use super::synth::SyntheticCase;
use crate::error::{ensure, Error, Result};
use crate::geometry::{rasterize, regions_to_mask, BinaryMask, Landmarks, RegionPartition, RegionSet};
use crate::tensor::Tensor;

/// One labelled image ready for training, at the model input size.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3,S,S]` row-major, values in `[0,1]`.
    pub image: Vec<f32>,
    pub landmarks: Landmarks,
    pub label: bool,
    /// Union cue regions; empty for negatives.
    pub cue_regions: RegionSet,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.landmarks.width
    }

    pub fn tensor(&self) -> Tensor {
        let s = self.size();
        Tensor::new(vec![3, s, s], self.image.iter().map(|&v| v as f64).collect())
            .expect("sample image matches its size")
    }

    /// Cue mask on the `feat x feat` grid for landmarks `lm` (the sample's
    /// own landmarks unless the image was moved).
    pub fn cue_mask_at(&self, lm: &Landmarks, feat: usize) -> Result<BinaryMask> {
        let labels = rasterize(&RegionPartition::derive(*lm)?, lm.width, lm.height)?;
        regions_to_mask(self.cue_regions, &labels, feat, feat)
    }

    pub fn cue_mask(&self, feat: usize) -> Result<BinaryMask> {
        self.cue_mask_at(&self.landmarks, feat)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusCounts {
    pub present: usize,
    pub absent: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input_size: usize,
    pub finding: String,
    pub samples: Vec<Sample>,
    pub consensus: ConsensusCounts,
}

fn image_to_f32(t: &Tensor) -> Vec<f32> {
    t.data().iter().map(|&v| v as f32).collect()
}

impl Dataset {
    /// Label synthetic cases by consensus of their simulated annotators;
    /// excluded images are dropped.
    pub fn from_cases(cases: &[SyntheticCase], finding: &str, rule: ConsensusRule) -> Result<Self> {
        ensure!(!cases.is_empty(), "no cases");
        let size = cases[0].landmarks.width;
        let mut counts = ConsensusCounts::default();
        let mut samples = Vec::with_capacity(cases.len());
        for c in cases {
            ensure!(
                c.landmarks.width == size && c.landmarks.height == size,
                "mixed image sizes in one dataset"
            );
            let label = consensus(&c.annotations, finding, rule)?;
            match label.verdict {
                Verdict::Excluded => {
                    counts.excluded += 1;
                    continue;
                }
                Verdict::Present => counts.present += 1,
                Verdict::Absent => counts.absent += 1,
            }
            let t = super::preprocess::rgb_to_tensor(&c.image);
            samples.push(Sample {
                id: c.id.clone(),
                image: image_to_f32(&t),
                landmarks: c.landmarks,
                label: label.is_present(),
                cue_regions: label.cue_regions,
            });
        }
        Ok(Dataset {
            input_size: size,
            finding: finding.to_string(),
            samples,
            consensus: counts,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label).count()
    }

    fn subset(&self, keep: &BTreeSet<&str>) -> Dataset {
        Dataset {
            input_size: self.input_size,
            finding: self.finding.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| keep.contains(s.id.as_str()))
                .cloned()
                .collect(),
            consensus: self.consensus,
        }
    }

    /// Seeded shuffle by image id; the first `round(fraction * n)` ids form
    /// the first part. Both parts keep the original sample order.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        ensure!(
            fraction > 0.0 && fraction < 1.0,
            "split fraction must lie in (0, 1), got {fraction}"
        );
        let mut ids: Vec<&str> = self.samples.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        let before = ids.len();
        ids.dedup();
        ensure!(ids.len() == before, "duplicate image ids in dataset");
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_first = (fraction * ids.len() as f64).round() as usize;
        ensure!(
            n_first > 0 && n_first < ids.len(),
            "split of {} images at {fraction} leaves one side empty",
            ids.len()
        );
        let first: BTreeSet<&str> = ids[..n_first].iter().copied().collect();
        let second: BTreeSet<&str> = ids[n_first..].iter().copied().collect();
        Ok((self.subset(&first), self.subset(&second)))
    }
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Path relative to the dataset directory.
    pub image: String,
    pub landmarks: Landmarks,
    pub split: String,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const ANNOTATION_FILE: &str = "annotations.jsonl";
pub const IMAGE_DIR: &str = "images";

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            Error::format("manifest", format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        entry.landmarks.validate()?;
        out.push(entry);
    }
    Ok(out)
}

/// Write cases as PNG images plus manifest and annotation files, appending
/// to any existing dataset in `dir`.
pub fn write_cases(dir: &Path, cases: &[SyntheticCase], split: &str) -> Result<()> {
    let images = dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = String::new();
    let mut annotations = Vec::new();
    let manifest_path = dir.join(MANIFEST_FILE);
    let annotation_path = dir.join(ANNOTATION_FILE);
    if manifest_path.exists() {
        manifest = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    if annotation_path.exists() {
        annotations = read_annotations(&annotation_path)?;
    }
    for c in cases {
        let rel = format!("{IMAGE_DIR}/{}.png", c.id);
        let path = dir.join(&rel);
        c.image.save(&path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(&path, io),
            other => Error::from(other),
        })?;
        let entry = ManifestEntry {
            image_id: c.id.clone(),
            image: rel,
            landmarks: c.landmarks,
            split: split.to_string(),
        };
        manifest.push_str(&serde_json::to_string(&entry).expect("manifest serializes"));
        manifest.push('\n');
        annotations.extend(c.annotations.iter().cloned());
    }
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    write_annotations(&annotation_path, &annotations)
}

/// Load, preprocess and label the images of `split` (all when `None`).
pub fn load_dataset(
    dir: &Path,
    split: Option<&str>,
    input_size: usize,
    finding: &str,
    rule: ConsensusRule,
) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let annotations = read_annotations(&dir.join(ANNOTATION_FILE))?;
    let mut by_image: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for a in &annotations {
        by_image.entry(a.image_id.as_str()).or_default().push(a.clone());
    }
    let mut counts = ConsensusCounts::default();
    let mut samples = Vec::new();
    for entry in manifest.iter().filter(|e| split.is_none_or(|s| e.split == s)) {
        let anns = by_image.get(entry.image_id.as_str()).ok_or_else(|| {
            Error::contract(format!("image {} has no annotations", entry.image_id))
        })?;
        let label = consensus(anns, finding, rule)?;
        match label.verdict {
            Verdict::Excluded => {
                counts.excluded += 1;
                continue;
            }
            Verdict::Present => counts.present += 1,
            Verdict::Absent => counts.absent += 1,
        }
        let path = dir.join(&entry.image);
        let img = image::open(&path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(&path, io),
                other => Error::from(other),
            })?
            .to_rgb8();
        ensure!(
            img.width() as usize == entry.landmarks.width
                && img.height() as usize == entry.landmarks.height,
            "image {} is {}x{} but its landmarks assume {}x{}",
            entry.image_id,
            img.width(),
            img.height(),
            entry.landmarks.width,
            entry.landmarks.height
        );
        let pre = preprocess(&img, input_size)?;
        samples.push(Sample {
            id: entry.image_id.clone(),
            image: image_to_f32(&pre.tensor),
            landmarks: pre.map_landmarks(&entry.landmarks)?,
            label: label.is_present(),
            cue_regions: label.cue_regions,
        });
    }
    ensure!(!samples.is_empty(), "no usable images in {}", dir.display());
    Ok(Dataset {
        input_size,
        finding: finding.to_string(),
        samples,
        consensus: counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_corpus, CorpusSpec};

    fn corpus(n: usize) -> Vec<SyntheticCase> {
        generate_corpus(&CorpusSpec {
            count: n,
            ..Default::default()
        })
        .unwrap()
    }

    fn fake(n: usize) -> Dataset {
        let lm = Landmarks::new(
            crate::geometry::Point::new(20.0, 32.0),
            crate::geometry::Point::new(44.0, 32.0),
            64,
            64,
        )
        .unwrap();
        Dataset {
            input_size: 64,
            finding: "drusen".into(),
            samples: (0..n)
                .map(|i| Sample {
                    id: format!("img{i:03}"),
                    image: vec![0.5; 3 * 64 * 64],
                    landmarks: lm,
                    label: i % 2 == 0,
                    cue_regions: RegionSet::EMPTY,
                })
                .collect(),
            consensus: ConsensusCounts::default(),
        }
    }

    #[test]
    fn ninety_ten_split() {
        let (a, b) = fake(100).split(0.9, 1).unwrap();
        assert_eq!((a.len(), b.len()), (90, 10));
        let ids_a: BTreeSet<_> = a.samples.iter().map(|s| &s.id).collect();
        assert!(b.samples.iter().all(|s| !ids_a.contains(&s.id)));
        let (c, _) = fake(100).split(0.9, 1).unwrap();
        assert_eq!(a, c);
        let (d, _) = fake(100).split(0.9, 2).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn degenerate_split_rejected() {
        assert!(fake(3).split(0.99, 0).is_err());
        assert!(fake(10).split(1.0, 0).is_err());
    }

    #[test]
    fn excluded_cases_dropped() {
        let cases = corpus(40);
        let ds = Dataset::from_cases(&cases, "hemorrhage", ConsensusRule::default()).unwrap();
        let c = ds.consensus;
        assert_eq!(c.present + c.absent + c.excluded, 40);
        assert_eq!(ds.len(), c.present + c.absent);
        assert_eq!(ds.positives(), c.present);
        for s in &ds.samples {
            assert_eq!(s.label, !s.cue_regions.is_empty());
        }
    }

    #[test]
    fn disk_round_trip_matches_in_memory() {
        let cases = corpus(6);
        let dir = tempfile::tempdir().unwrap();
        write_cases(dir.path(), &cases[..4], "train").unwrap();
        write_cases(dir.path(), &cases[4..], "test").unwrap();
        let rule = ConsensusRule::default();
        let mem = Dataset::from_cases(&cases[..4], "hemorrhage", rule).unwrap();
        let disk = load_dataset(dir.path(), Some("train"), 64, "hemorrhage", rule).unwrap();
        assert_eq!(mem.len(), disk.len());
        for (a, b) in mem.samples.iter().zip(&disk.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.landmarks, b.landmarks);
            assert_eq!((a.label, a.cue_regions), (b.label, b.cue_regions));
            assert!(a.image == b.image, "pixels differ for {}", a.id);
        }
        let all = read_manifest(dir.path()).unwrap();
        assert_eq!(all.len(), 6);
        assert_eq!(all.iter().filter(|e| e.split == "test").count(), 2);
    }
}
