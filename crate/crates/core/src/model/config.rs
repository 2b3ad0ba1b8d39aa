use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Typical lesion extent of a finding; selects the atrous rates and whether
/// a max-pool precedes global pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionSize {
    Large,
    Medium,
    Small,
}

impl LesionSize {
    pub fn pyramid_rates(self) -> &'static [usize] {
        match self {
            LesionSize::Large => &[1, 2, 4, 8],
            LesionSize::Medium => &[1, 2, 4],
            LesionSize::Small => &[1, 2],
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "large" => Some(LesionSize::Large),
            "medium" => Some(LesionSize::Medium),
            "small" => Some(LesionSize::Small),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LesionSize::Large => "large",
            LesionSize::Medium => "medium",
            LesionSize::Small => "small",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub stem_depth: usize,
    /// Number of residual + reduction stages (at most four feed the
    /// concatenation).
    pub stage_count: usize,
    pub lesion_size: LesionSize,
    /// Channels per atrous branch.
    pub pyramid_depth: usize,
    /// `input_size / feature_size`.
    pub downscale_factor: usize,
    pub maxpool_window: usize,
    pub maxpool_stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 512,
            stem_depth: 16,
            stage_count: 4,
            lesion_size: LesionSize::Large,
            pyramid_depth: 32,
            downscale_factor: 16,
            maxpool_window: 4,
            maxpool_stride: 4,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration that trains on a CPU in minutes.
    pub fn toy() -> Self {
        ModelConfig {
            input_size: 64,
            stem_depth: 4,
            stage_count: 2,
            lesion_size: LesionSize::Medium,
            pyramid_depth: 8,
            downscale_factor: 4,
            ..Default::default()
        }
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / self.downscale_factor.max(1)
    }

    pub fn pyramid_rates(&self) -> &'static [usize] {
        self.lesion_size.pyramid_rates()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_size > 0, "input_size must be positive");
        ensure!(self.stem_depth > 0, "stem_depth must be positive");
        ensure!(self.pyramid_depth > 0, "pyramid_depth must be positive");
        ensure!(
            (1..=4).contains(&self.stage_count),
            "stage_count must be in 1..=4, got {}",
            self.stage_count
        );
        ensure!(
            self.downscale_factor > 0 && self.input_size % self.downscale_factor == 0,
            "divisibility invariant: input_size {} is not divisible by downscale_factor {}",
            self.input_size,
            self.downscale_factor
        );
        ensure!(
            self.downscale_factor == 1 << self.stage_count,
            "downscale_factor {} must equal 2^stage_count = {} (the feature map is the coarsest reduction output)",
            self.downscale_factor,
            1usize << self.stage_count
        );
        let wf = self.feature_size();
        for &rate in self.pyramid_rates() {
            ensure!(
                rate * 2 <= wf,
                "rate-fit invariant: dilation {} needs dilation*2 <= feature size {} ({} lesions, input {}, downscale {})",
                rate,
                wf,
                self.lesion_size.as_str(),
                self.input_size,
                self.downscale_factor
            );
        }
        if self.lesion_size == LesionSize::Small {
            ensure!(
                self.maxpool_window > 0 && self.maxpool_stride > 0 && self.maxpool_window <= wf,
                "max-pool window {} must be positive and fit the {}x{} feature map",
                self.maxpool_window,
                wf,
                wf
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_per_size() {
        assert_eq!(LesionSize::Large.pyramid_rates(), &[1, 2, 4, 8]);
        assert_eq!(LesionSize::Medium.pyramid_rates(), &[1, 2, 4]);
        assert_eq!(LesionSize::Small.pyramid_rates(), &[1, 2]);
    }

    #[test]
    fn default_feature_size() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.feature_size(), 32);
    }

    #[test]
    fn toy_rate_fit() {
        let mut c = ModelConfig::toy();
        c.validate().unwrap();
        assert_eq!(c.feature_size(), 16);
        c.lesion_size = LesionSize::Large;
        c.validate().unwrap();
        c.stage_count = 3;
        c.downscale_factor = 8;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("rate-fit invariant"), "{err}");
        assert!(err.contains("dilation 8"), "{err}");
    }

    #[test]
    fn indivisible_input_rejected() {
        let c = ModelConfig {
            input_size: 62,
            ..ModelConfig::toy()
        };
        assert!(c.validate().unwrap_err().to_string().contains("divisibility"));
    }
}
