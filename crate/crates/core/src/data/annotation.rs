use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{regions_to_mask, BinaryMask, RegionLabelMap, RegionSet};

/// Finding vocabulary accepted in annotation records.
pub const FINDINGS: [&str; 8] = [
    "hemorrhage",
    "hard exudate",
    "drusen",
    "cotton wool patch",
    "macular hole",
    "membrane",
    "RNFL defect",
    "retinal pigmentary change",
];

pub fn check_finding(name: &str) -> Result<()> {
    ensure!(
        FINDINGS.contains(&name),
        "unknown finding {name:?}; expected one of {FINDINGS:?}"
    );
    Ok(())
}

/// One annotator's record for one image. An empty map marks a normal image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Annotation {
    pub image_id: String,
    pub annotator_id: String,
    pub findings: BTreeMap<String, RegionSet>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FindingRecord {
    name: String,
    regions: Vec<u8>,
}

/// Wire form shared by the annotation file and the HTTP API.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    image_id: String,
    annotator_id: String,
    findings: Vec<FindingRecord>,
}

impl Annotation {
    pub fn normal(image_id: impl Into<String>, annotator_id: impl Into<String>) -> Self {
        Annotation {
            image_id: image_id.into(),
            annotator_id: annotator_id.into(),
            findings: BTreeMap::new(),
        }
    }

    pub fn with_finding(mut self, name: &str, regions: RegionSet) -> Self {
        self.findings.insert(name.to_string(), regions);
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.image_id.is_empty(), "annotation without image_id");
        ensure!(!self.annotator_id.is_empty(), "annotation without annotator_id");
        for name in self.findings.keys() {
            check_finding(name)?;
        }
        Ok(())
    }

    /// Whether this annotator marked `finding`.
    pub fn marks(&self, finding: &str) -> Option<RegionSet> {
        self.findings.get(finding).copied()
    }

    pub fn to_json(&self) -> String {
        let rec = AnnotationRecord {
            image_id: self.image_id.clone(),
            annotator_id: self.annotator_id.clone(),
            findings: self
                .findings
                .iter()
                .map(|(name, r)| FindingRecord {
                    name: name.clone(),
                    regions: r.to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&rec).expect("annotation serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: AnnotationRecord =
            serde_json::from_str(text).map_err(|e| Error::format("annotation", e.to_string()))?;
        let mut findings = BTreeMap::new();
        for f in rec.findings {
            let set = RegionSet::from_raw(&f.regions)?;
            let prev = findings.insert(f.name.clone(), set);
            ensure!(prev.is_none(), "finding {:?} listed twice", f.name);
        }
        let a = Annotation {
            image_id: rec.image_id,
            annotator_id: rec.annotator_id,
            findings,
        };
        a.validate()?;
        Ok(a)
    }
}

/// Read a JSON-lines annotation file. Blank lines are skipped.
pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(Annotation::from_json(&line).map_err(|e| {
            Error::format("annotation file", format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let mut text = String::new();
    for a in annotations {
        text.push_str(&a.to_json());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Append one record to a JSON-lines annotation file, creating it if needed.
pub fn append_annotation(path: &Path, a: &Annotation) -> Result<()> {
    a.validate()?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", a.to_json()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Present,
    Absent,
    Excluded,
}

/// How three annotators' marks become a label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusRule {
    /// Marks needed for a positive label (2 or 3).
    pub min_marks: usize,
    /// Exclude images marked by some but fewer than `min_marks`
    /// annotators; otherwise they count as absent.
    pub exclude_partial: bool,
}

impl Default for ConsensusRule {
    fn default() -> Self {
        ConsensusRule {
            min_marks: 2,
            exclude_partial: true,
        }
    }
}

pub const ANNOTATORS_PER_IMAGE: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusLabel {
    pub image_id: String,
    pub finding: String,
    pub verdict: Verdict,
    /// Union of the marking annotators' regions; empty unless present.
    pub cue_regions: RegionSet,
}

impl ConsensusLabel {
    pub fn is_present(&self) -> bool {
        self.verdict == Verdict::Present
    }

    /// Cue mask on the feature grid, from the image's region labels.
    pub fn cue_mask(&self, labels: &RegionLabelMap, feat: usize) -> Result<BinaryMask> {
        regions_to_mask(self.cue_regions, labels, feat, feat)
    }
}

/// Merge the three annotations of one image for `finding`.
pub fn consensus(
    annotations: &[Annotation],
    finding: &str,
    rule: ConsensusRule,
) -> Result<ConsensusLabel> {
    ensure!(
        annotations.len() == ANNOTATORS_PER_IMAGE,
        "consensus needs exactly {ANNOTATORS_PER_IMAGE} annotations, got {}",
        annotations.len()
    );
    ensure!(
        (2..=3).contains(&rule.min_marks),
        "consensus_min must be 2 or 3, got {}",
        rule.min_marks
    );
    check_finding(finding)?;
    let image_id = &annotations[0].image_id;
    ensure!(
        annotations.iter().all(|a| &a.image_id == image_id),
        "annotations for different images mixed in one consensus"
    );
    let mut ids: Vec<&str> = annotations.iter().map(|a| a.annotator_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    ensure!(
        ids.len() == ANNOTATORS_PER_IMAGE,
        "image {image_id}: annotators must be distinct"
    );
    let marks: Vec<RegionSet> = annotations.iter().filter_map(|a| a.marks(finding)).collect();
    let verdict = match marks.len() {
        0 => Verdict::Absent,
        n if n >= rule.min_marks => Verdict::Present,
        _ if rule.exclude_partial => Verdict::Excluded,
        _ => Verdict::Absent,
    };
    let cue_regions = if verdict == Verdict::Present {
        crate::geometry::union_regions(&marks)
    } else {
        RegionSet::EMPTY
    };
    ensure!(
        verdict != Verdict::Present || !cue_regions.is_empty(),
        "image {image_id}: {finding} marked present without regions"
    );
    Ok(ConsensusLabel {
        image_id: image_id.clone(),
        finding: finding.to_string(),
        verdict,
        cue_regions,
    })
}

/// Group annotations by image and merge each group. Images without
/// exactly three records are rejected.
pub fn merge_annotations(
    annotations: &[Annotation],
    finding: &str,
    rule: ConsensusRule,
) -> Result<Vec<ConsensusLabel>> {
    let mut by_image: BTreeMap<&str, Vec<Annotation>> = BTreeMap::new();
    for a in annotations {
        by_image.entry(&a.image_id).or_default().push(a.clone());
    }
    by_image
        .values()
        .map(|group| consensus(group, finding, rule))
        .collect()
}
