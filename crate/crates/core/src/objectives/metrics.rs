use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

fn check_two_class(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    ensure!(
        scores.len() == labels.len(),
        "{} scores vs {} labels",
        scores.len(),
        labels.len()
    );
    ensure!(
        scores.iter().all(|s| !s.is_nan()),
        "scores must not contain NaN"
    );
    let (pos, neg) = class_counts(labels);
    ensure!(
        pos > 0 && neg > 0,
        "need both classes present (got {} positives, {} negatives)",
        pos,
        neg
    );
    Ok((pos, neg))
}

/// Area under the ROC curve via the rank-sum statistic, ties counted half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_two_class(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// ROC points `(false positive rate, true positive rate)` from the
/// strictest threshold to the most lenient, one point per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_two_class(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    /// Samples with `score >= threshold` are called positive.
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub harmonic_mean: f64,
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Threshold maximizing the harmonic mean of sensitivity and specificity.
///
/// Candidates are the midpoints between consecutive distinct scores plus
/// `-inf` and `+inf`. Ties prefer higher sensitivity, then lower threshold.
pub fn operating_point(scores: &[f64], labels: &[bool]) -> Result<OperatingPoint> {
    let (pos, neg) = check_two_class(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sweep thresholds upward; below the first threshold everything is positive.
    let mut fn_ = 0usize; // positives below threshold
    let mut tn = 0usize; // negatives below threshold
    let eval = |threshold: f64, fn_: usize, tn: usize| {
        let sens = (pos - fn_) as f64 / pos as f64;
        let spec = tn as f64 / neg as f64;
        OperatingPoint {
            threshold,
            sensitivity: sens,
            specificity: spec,
            harmonic_mean: harmonic(sens, spec),
        }
    };
    let mut best = eval(f64::NEG_INFINITY, 0, 0);
    let better = |c: &OperatingPoint, b: &OperatingPoint| {
        c.harmonic_mean > b.harmonic_mean
            || (c.harmonic_mean == b.harmonic_mean && c.sensitivity > b.sensitivity)
    };
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                fn_ += 1;
            } else {
                tn += 1;
            }
            i += 1;
        }
        let threshold = if i < order.len() {
            s + (scores[order[i]] - s) / 2.0
        } else {
            f64::INFINITY
        };
        let cand = eval(threshold, fn_, tn);
        // thresholds increase along the sweep, so equality keeps the lower one
        if better(&cand, &best) {
            best = cand;
        }
    }
    Ok(best)
}

/// Fraction of total activation that falls inside the cue mask. `None`
/// when the activation sums to zero.
pub fn air(activation: &[f64], mask: &[f64]) -> Option<f64> {
    debug_assert_eq!(activation.len(), mask.len());
    let total: f64 = activation.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let inside: f64 = activation.iter().zip(mask).map(|(a, m)| a * m).sum();
    Some(inside / total)
}

/// One evaluated sample.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub score: f64,
    pub label: bool,
    pub activation: Vec<f64>,
    /// Cue mask at activation resolution, when cues exist for this sample.
    pub cue_mask: Option<Vec<f64>>,
}

/// Mean AIR over true positives and false negatives at `threshold`.
/// Only positives with cues contribute; an empty subset yields `None`.
pub fn air_by_subset(samples: &[EvalSample], threshold: f64) -> (Option<f64>, Option<f64>) {
    let mut tp = Vec::new();
    let mut fn_ = Vec::new();
    for s in samples.iter().filter(|s| s.label) {
        let Some(mask) = &s.cue_mask else { continue };
        let Some(v) = air(&s.activation, mask) else {
            log::warn!("sample with zero total activation excluded from AIR");
            continue;
        };
        if s.score >= threshold {
            tp.push(v);
        } else {
            fn_.push(v);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    (mean(&tp), mean(&fn_))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    #[serde(with = "threshold_repr")]
    pub threshold: Option<f64>,
    pub air_tp: Option<f64>,
    pub air_fn: Option<f64>,
    pub counts: Counts,
}

impl MetricsReport {
    /// Compute every metric. A single-class set leaves AUROC and the
    /// operating point undefined; AIR is then split at 0.5.
    pub fn compute(samples: &[EvalSample]) -> MetricsReport {
        let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
        let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
        let auc = auroc(&scores, &labels).ok();
        let op = operating_point(&scores, &labels).ok();
        let threshold = op.map_or(0.5, |o| o.threshold);
        let mut counts = Counts::default();
        for s in samples {
            match (s.label, s.score >= threshold) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fn_ += 1,
                (false, true) => counts.fp += 1,
                (false, false) => counts.tn += 1,
            }
        }
        let (air_tp, air_fn) = air_by_subset(samples, threshold);
        MetricsReport {
            auroc: auc,
            sensitivity: op.map(|o| o.sensitivity),
            specificity: op.map(|o| o.specificity),
            threshold: op.map(|o| o.threshold),
            air_tp,
            air_fn,
            counts,
        }
    }
}

/// Thresholds may be infinite, which JSON numbers cannot carry.
mod threshold_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if *x == f64::INFINITY => s.serialize_str("+inf"),
            Some(x) if *x == f64::NEG_INFINITY => s.serialize_str("-inf"),
            Some(x) => s.serialize_f64(*x),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(x)) => Ok(Some(x)),
            Some(Repr::Text(t)) => match t.as_str() {
                "+inf" => Ok(Some(f64::INFINITY)),
                "-inf" => Ok(Some(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!("bad threshold {other:?}"))),
            },
        }
    }
}
