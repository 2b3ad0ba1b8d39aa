use std::path::Path;

use fundus_guide::data::{AnnotatorModel, AugmentPolicy, ConsensusRule, CorpusSpec};
use fundus_guide::model::{LesionSize, ModelConfig};
use fundus_guide::train::TrainConfig;
use fundus_guide::{Error, Result};
use serde::{Deserialize, Serialize};

/// Every tunable of a run in one flat key/value document.
///
/// Unset keys take the defaults below; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // model
    pub input_size: usize,
    pub stem_depth: usize,
    pub stage_count: usize,
    pub lesion_size: LesionSize,
    pub pyramid_depth: usize,
    pub downscale_factor: usize,
    pub maxpool_window: usize,
    pub maxpool_stride: usize,

    // optimization
    pub batch_size: usize,
    pub momentum: f64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub lambda: f64,
    pub epsilon_guide: f64,
    pub suppress_negatives: bool,
    pub augment: AugmentPolicy,
    pub seed: u64,

    // data
    pub finding: String,
    pub consensus_min: usize,
    pub exclude_partial: bool,
    pub validation_fraction: f64,

    // synthetic corpus
    pub count: usize,
    pub test_count: usize,
    pub positive_fraction: f64,
    pub target_regions: Vec<u8>,
    pub annotator_sensitivity: f64,
    pub annotator_false_mark: f64,
    pub annotator_extra_region: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::toy();
        let t = TrainConfig::default();
        let c = CorpusSpec::default();
        let r = ConsensusRule::default();
        RunConfig {
            input_size: m.input_size,
            stem_depth: m.stem_depth,
            stage_count: m.stage_count,
            lesion_size: m.lesion_size,
            pyramid_depth: m.pyramid_depth,
            downscale_factor: m.downscale_factor,
            maxpool_window: m.maxpool_window,
            maxpool_stride: m.maxpool_stride,
            batch_size: t.batch_size,
            momentum: t.momentum,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            plateau_patience: t.plateau_patience,
            early_stop_patience: t.early_stop_patience,
            max_epochs: t.max_epochs,
            lambda: t.lambda,
            epsilon_guide: t.epsilon_guide,
            suppress_negatives: t.suppress_negatives,
            augment: t.augment,
            seed: t.seed,
            finding: c.finding,
            consensus_min: r.min_marks,
            exclude_partial: r.exclude_partial,
            validation_fraction: 0.1,
            count: c.count,
            test_count: 100,
            positive_fraction: c.positive_fraction,
            target_regions: c.target_regions,
            annotator_sensitivity: c.annotators.sensitivity,
            annotator_false_mark: c.annotators.false_mark,
            annotator_extra_region: c.annotators.extra_region,
        }
    }
}

impl RunConfig {
    /// Read a config file, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text)
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::contract(format!("config: {}", e.message())))
    }

    /// Apply `key=value` overrides. Values are read as TOML literals, with
    /// bare words taken as strings.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut table = toml::Table::try_from(&*self).expect("config serializes to a table");
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::contract(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            if !table.contains_key(key) {
                return Err(Error::contract(format!("unknown config key {key:?}")));
            }
            let raw = raw.trim();
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.to_string(), value);
        }
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::contract(format!("override: {}", e.message())))?;
        Ok(())
    }

    /// The effective config as a document that [`RunConfig::parse`] reads back.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            input_size: self.input_size,
            stem_depth: self.stem_depth,
            stage_count: self.stage_count,
            lesion_size: self.lesion_size,
            pyramid_depth: self.pyramid_depth,
            downscale_factor: self.downscale_factor,
            maxpool_window: self.maxpool_window,
            maxpool_stride: self.maxpool_stride,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            momentum: self.momentum,
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay,
            plateau_patience: self.plateau_patience,
            early_stop_patience: self.early_stop_patience,
            max_epochs: self.max_epochs,
            lambda: self.lambda,
            epsilon_guide: self.epsilon_guide,
            suppress_negatives: self.suppress_negatives,
            augment: self.augment,
            seed: self.seed,
        }
    }

    pub fn rule(&self) -> ConsensusRule {
        ConsensusRule {
            min_marks: self.consensus_min,
            exclude_partial: self.exclude_partial,
        }
    }

    /// Corpus recipe for `count` cases; `offset` separates the id and seed
    /// streams of different splits.
    pub fn corpus(&self, count: usize, prefix: &str, offset: u64) -> CorpusSpec {
        CorpusSpec {
            count,
            input_size: self.input_size,
            finding: self.finding.clone(),
            lesion_size: self.lesion_size,
            positive_fraction: self.positive_fraction,
            target_regions: self.target_regions.clone(),
            seed: self.seed.wrapping_add(offset),
            annotators: AnnotatorModel {
                sensitivity: self.annotator_sensitivity,
                false_mark: self.annotator_false_mark,
                extra_region: self.annotator_extra_region,
            },
            id_prefix: prefix.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train().validate()?;
        fundus_guide::data::check_finding(&self.finding)?;
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::contract(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("learning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let mut c = RunConfig::default();
        assert!(c.apply_overrides(&["nope=1".into()]).is_err());
    }

    #[test]
    fn overrides_take_typed_values() {
        let mut c = RunConfig::parse("max_epochs = 3\nfinding = \"drusen\"\n").unwrap();
        c.apply_overrides(&[
            "max_epochs=7".into(),
            "lambda = 0.5".into(),
            "finding=exudate".into(),
            "target_regions=[3,4]".into(),
            "augment=full".into(),
        ])
        .unwrap();
        assert_eq!(c.max_epochs, 7);
        assert_eq!(c.lambda, 0.5);
        assert_eq!(c.finding, "exudate");
        assert_eq!(c.target_regions, vec![3, 4]);
        assert_eq!(c.augment, AugmentPolicy::Full);
    }

    #[test]
    fn ill_typed_override_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply_overrides(&["max_epochs=lots".into()]).is_err());
    }
}
