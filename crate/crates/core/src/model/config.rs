//! Model configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How audio and visual features are combined at each pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Bidirectional cross-attention with a learned per-instant gate.
    GatedXattn,
    /// Channel-concatenate the two modalities and project with a 1-D conv.
    ConcatBaseline,
    /// Elementwise max over the two modality maps.
    ChannelPoolBaseline,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gated" | "gated_xattn" => Ok(FusionMode::GatedXattn),
            "concat" | "concat_baseline" => Ok(FusionMode::ConcatBaseline),
            "pool" | "channel_pool" | "channel_pool_baseline" => Ok(FusionMode::ChannelPoolBaseline),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?}; expected gated | concat | pool"
            ))),
        }
    }

    pub fn cli_name(&self) -> &'static str {
        match self {
            FusionMode::GatedXattn => "gated",
            FusionMode::ConcatBaseline => "concat",
            FusionMode::ChannelPoolBaseline => "pool",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_levels: usize,
    pub num_heads: usize,
    pub d_visual_in: usize,
    pub d_audio_in: usize,
    pub num_classes: usize,
    pub fusion_mode: FusionMode,
    /// Per-level [r_min, r_max) bounds on max(d_start, d_end) in that
    /// level's grid units; `None` means unbounded. Must tile [0, inf).
    pub regression_ranges: Vec<(f64, Option<f64>)>,
    /// Adds the level's visual map back onto the fused features. On by
    /// default; switch off to run the fusion equation verbatim.
    pub residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            num_levels: 6,
            num_heads: 4,
            d_visual_in: 2304,
            d_audio_in: 128,
            num_classes: 1,
            fusion_mode: FusionMode::GatedXattn,
            regression_ranges: default_regression_ranges(6),
            residual: true,
        }
    }
}

/// FCOS-convention ranges: [0,4), [4,8), [8,16), ... with the last level
/// unbounded.
pub fn default_regression_ranges(num_levels: usize) -> Vec<(f64, Option<f64>)> {
    let mut out = Vec::with_capacity(num_levels);
    let mut lo = 0.0;
    let mut hi = 4.0;
    for l in 0..num_levels {
        if l + 1 == num_levels {
            out.push((lo, None));
        } else {
            out.push((lo, Some(hi)));
            lo = hi;
            hi *= 2.0;
        }
    }
    out
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 {
            return Err(Error::Config("num_levels must be at least 1".into()));
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.d_model == 0 || self.d_visual_in == 0 || self.d_audio_in == 0 {
            return Err(Error::Config("embedding dims must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.regression_ranges.len() != self.num_levels {
            return Err(Error::Config(format!(
                "regression_ranges has {} entries for {} levels",
                self.regression_ranges.len(),
                self.num_levels
            )));
        }
        // contiguous cover of [0, inf)
        if self.regression_ranges[0].0 != 0.0 {
            return Err(Error::Config("regression ranges must start at 0".into()));
        }
        for i in 0..self.num_levels {
            let (lo, hi) = self.regression_ranges[i];
            match hi {
                Some(h) => {
                    if h <= lo {
                        return Err(Error::Config(format!("regression range {i} is empty")));
                    }
                    if i + 1 == self.num_levels {
                        return Err(Error::Config("last regression range must be unbounded".into()));
                    }
                    if self.regression_ranges[i + 1].0 != h {
                        return Err(Error::Config(format!(
                            "regression ranges must be contiguous at level {i}"
                        )));
                    }
                }
                None => {
                    if i + 1 != self.num_levels {
                        return Err(Error::Config(
                            "only the last regression range may be unbounded".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_ranges_tile_the_line() {
        let r = default_regression_ranges(6);
        assert_eq!(r[0], (0.0, Some(4.0)));
        assert_eq!(r[1], (4.0, Some(8.0)));
        assert_eq!(r[4], (32.0, Some(64.0)));
        assert_eq!(r[5], (64.0, None));
        let cfg = ModelConfig {
            num_classes: 3,
            ..ModelConfig::default()
        };
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut cfg = ModelConfig::default();
        cfg.num_heads = 5; // 128 % 5 != 0
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default();
        cfg.regression_ranges[2].0 = 9.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default();
        cfg.regression_ranges[5].1 = Some(128.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fusion_mode_parsing() {
        assert_eq!(FusionMode::parse("gated").unwrap(), FusionMode::GatedXattn);
        assert_eq!(FusionMode::parse("concat").unwrap(), FusionMode::ConcatBaseline);
        assert_eq!(FusionMode::parse("pool").unwrap(), FusionMode::ChannelPoolBaseline);
        assert!(FusionMode::parse("other").is_err());
    }
}
