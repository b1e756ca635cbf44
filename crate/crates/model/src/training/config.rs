use maskmatch_core::metrics::{DEFAULT_IMPOSTERS_PER_STEP, DEFAULT_VALIDATION_STEPS};
use maskmatch_core::pairs::DrawMode;
use maskmatch_core::scoring::Tap;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

pub const DEFAULT_VALIDATION_INTERVAL: u64 = 2500;
pub const DEFAULT_RETENTION_THRESHOLD: f64 = 0.90;
pub const PRESET_NAMES: [&str; 5] = ["CP1", "CP2", "FT1", "FT2", "FT3"];

fn half() -> f64 {
    0.5
}
fn validation_interval() -> u64 {
    DEFAULT_VALIDATION_INTERVAL
}
fn validation_steps() -> usize {
    DEFAULT_VALIDATION_STEPS
}
fn imposters_per_step() -> usize {
    DEFAULT_IMPOSTERS_PER_STEP
}
fn retention_threshold() -> f64 {
    DEFAULT_RETENTION_THRESHOLD
}
fn final_tap() -> Tap {
    Tap::Final
}
fn one() -> u64 {
    1
}

/// Supervised Siamese finetuning settings. The first eight fields are the
/// columns of the experiment table; the rest are protocol knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub name: String,
    /// Lineage reference of the starting checkpoint; `None` means the
    /// contrastively pretrained representation.
    #[serde(default)]
    pub base_checkpoint: Option<String>,
    /// Batch steps.
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub frozen_fraction: f64,
    /// Mine the hardest of this many imposter candidates.
    #[serde(default)]
    pub hard_sample_size: Option<usize>,
    pub draw_strategy: DrawMode,
    #[serde(default = "half")]
    pub authentic_probability: f64,
    #[serde(default = "validation_interval")]
    pub validation_interval: u64,
    #[serde(default = "validation_steps")]
    pub validation_steps: usize,
    #[serde(default = "imposters_per_step")]
    pub imposters_per_step: usize,
    #[serde(default = "retention_threshold")]
    pub retention_threshold: f64,
    #[serde(default = "final_tap")]
    pub validation_tap: Tap,
    #[serde(default = "final_tap")]
    pub mining_tap: Tap,
    /// Steps between refreshes of the model snapshot used for mining.
    #[serde(default = "one")]
    pub mining_refresh: u64,
    #[serde(default)]
    pub seed: u64,
}

impl FinetuneConfig {
    /// Minimal config; protocol knobs at their defaults.
    pub fn new(name: impl Into<String>, iterations: u64, batch_size: usize, learning_rate: f64) -> Self {
        Self {
            name: name.into(),
            base_checkpoint: None,
            iterations,
            batch_size,
            learning_rate,
            frozen_fraction: 0.0,
            hard_sample_size: None,
            draw_strategy: DrawMode::Uniform,
            authentic_probability: half(),
            validation_interval: DEFAULT_VALIDATION_INTERVAL,
            validation_steps: DEFAULT_VALIDATION_STEPS,
            imposters_per_step: DEFAULT_IMPOSTERS_PER_STEP,
            retention_threshold: DEFAULT_RETENTION_THRESHOLD,
            validation_tap: Tap::Final,
            mining_tap: Tap::Final,
            mining_refresh: 1,
            seed: 0,
        }
    }

    /// Rows of the experiment table: CP1, CP2, FT1, FT2, FT3.
    pub fn preset(name: &str) -> Result<Self> {
        use DrawMode::{Stratified, Uniform};
        let (base, iterations, batch, lr, frozen, hard, draw) = match name {
            "CP1" => (None, 695_000, 128, 1.0, 0.5, None, Uniform),
            "CP2" => (None, 885_000, 128, 1.0, 0.5, None, Uniform),
            "FT1" => (Some("CP1"), 11_001, 32, 0.001, 0.9, Some(16), Stratified),
            "FT2" => (Some("CP1"), 11_251, 32, 0.01, 0.8, Some(32), Stratified),
            "FT3" => (Some("CP2"), 14_501, 32, 0.01, 0.5, Some(10), Stratified),
            other => return Err(ModelError::Config(format!("unknown preset {other:?}"))),
        };
        let mut c = Self::new(name, iterations, batch, lr);
        c.base_checkpoint = base.map(str::to_string);
        c.frozen_fraction = frozen;
        c.hard_sample_size = hard;
        c.draw_strategy = draw;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(format!("{}: {m}", self.name)));
        if !(0.0..=1.0).contains(&self.frozen_fraction) {
            return Err(ModelError::Domain(format!("frozen fraction {} outside [0, 1]", self.frozen_fraction)));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail("learning_rate must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.authentic_probability) {
            return fail("authentic_probability outside [0, 1]");
        }
        if self.hard_sample_size == Some(0) {
            return fail("hard_sample_size must be at least 1");
        }
        if self.validation_interval == 0 || self.mining_refresh == 0 {
            return fail("validation_interval and mining_refresh must be positive");
        }
        if self.validation_steps == 0 || self.imposters_per_step == 0 {
            return fail("validation needs at least one step and one imposter");
        }
        if !(0.0..=1.0).contains(&self.retention_threshold) {
            return fail("retention_threshold outside [0, 1]");
        }
        Ok(())
    }
}

/// Augmentation recipe for the two contrastive views: random resized crop,
/// horizontal flip, colour jitter, random grayscale and Gaussian blur.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub recipe: String,
    /// Area fraction range of the random crop.
    pub crop_scale: (f64, f64),
    pub flip_probability: f64,
    pub jitter_probability: f64,
    /// Brightness, contrast and saturation factors are drawn from
    /// [1 - s, 1 + s].
    pub jitter_strength: f64,
    pub grayscale_probability: f64,
    pub blur_probability: f64,
    /// Blur sigma range as a fraction of the image side.
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            recipe: "moco_v2".into(),
            crop_scale: (0.2, 1.0),
            flip_probability: 0.5,
            jitter_probability: 0.8,
            jitter_strength: 0.4,
            grayscale_probability: 0.2,
            blur_probability: 0.5,
            blur_sigma: (0.1 / 224.0, 2.0 / 224.0),
        }
    }
}

/// Momentum-contrast instance-discrimination pretraining settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub queue_size: usize,
    pub momentum_coefficient: f64,
    pub epochs: u64,
    /// Stop after this many batch steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub augmentation: AugmentConfig,
    pub projection_head: bool,
    pub projection_dim: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.015,
            batch_size: 128,
            temperature: 0.2,
            queue_size: 4096,
            momentum_coefficient: 0.999,
            epochs: 1,
            max_steps: None,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            augmentation: AugmentConfig::default(),
            projection_head: true,
            projection_dim: 128,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if !(self.temperature > 0.0) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.queue_size < self.batch_size {
            return fail(format!("queue_size {} is smaller than batch_size {}", self.queue_size, self.batch_size));
        }
        if !(self.momentum_coefficient > 0.0 && self.momentum_coefficient < 1.0) {
            return fail(format!("momentum_coefficient {} outside (0, 1)", self.momentum_coefficient));
        }
        if self.projection_head && self.projection_dim == 0 {
            return fail("projection_dim must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail("learning_rate must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        let ft1 = FinetuneConfig::preset("FT1").unwrap();
        assert_eq!(ft1.base_checkpoint.as_deref(), Some("CP1"));
        assert_eq!((ft1.iterations, ft1.batch_size, ft1.learning_rate), (11_001, 32, 0.001));
        assert_eq!((ft1.frozen_fraction, ft1.hard_sample_size, ft1.draw_strategy), (0.9, Some(16), DrawMode::Stratified));
        let cp2 = FinetuneConfig::preset("CP2").unwrap();
        assert_eq!((cp2.iterations, cp2.batch_size, cp2.learning_rate, cp2.hard_sample_size), (885_000, 128, 1.0, None));
        assert_eq!(FinetuneConfig::preset("FT3").unwrap().base_checkpoint.as_deref(), Some("CP2"));
        assert!(FinetuneConfig::preset("FT9").is_err());
        for name in PRESET_NAMES {
            FinetuneConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn config_round_trips_through_toml_shapes() {
        let c = FinetuneConfig::preset("FT2").unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<FinetuneConfig>(&json).unwrap(), c);
        let minimal: FinetuneConfig = serde_json::from_str(
            r#"{"name":"x","iterations":5,"batch_size":2,"learning_rate":0.1,"frozen_fraction":0.0,"draw_strategy":"uniform"}"#,
        )
        .unwrap();
        assert_eq!(minimal.validation_interval, 2500);
        assert_eq!(minimal.retention_threshold, 0.9);
    }

    #[test]
    fn inconsistent_settings_are_rejected() {
        let mut c = FinetuneConfig::new("x", 1, 1, 0.1);
        c.frozen_fraction = 1.2;
        assert!(matches!(c.validate(), Err(ModelError::Domain(_))));
        let p = PretrainConfig { queue_size: 64, batch_size: 128, ..Default::default() };
        assert!(matches!(p.validate(), Err(ModelError::Config(_))));
        assert!(PretrainConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(PretrainConfig { momentum_coefficient: 1.0, ..Default::default() }.validate().is_err());
        PretrainConfig::default().validate().unwrap();
    }
}
