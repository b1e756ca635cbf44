//! Run configuration read from TOML. Relative paths are resolved against
//! the config file's directory; the resolved form is what a run directory
//! freezes.

use std::path::{Path, PathBuf};

use maskmatch_core::geometry::MaskConfig;
use maskmatch_core::registry::{Role, DEFAULT_SPLIT_FRACTIONS};
use maskmatch_core::scoring::Tap;
use maskmatch_model::training::{FinetuneConfig, PretrainConfig};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Every subsystem seed is derived from this one.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PairsSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluate: Option<EvaluateSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub benchmark1: Option<Benchmark1Section>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub benchmark2: Option<Benchmark2Section>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Image root for every manifest; `MASKMATCH_DATA_ROOT` takes precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub dataset: String,
    pub identities: usize,
    pub images_per_identity: usize,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    pub manifest: PathBuf,
    #[serde(default)]
    pub params: MaskConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub manifest: PathBuf,
    #[serde(default = "default_fractions")]
    pub fractions: (f64, f64),
}

fn default_fractions() -> (f64, f64) {
    DEFAULT_SPLIT_FRACTIONS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsSection {
    pub manifest: PathBuf,
    /// Restrict pairs to one role of this split file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<PathBuf>,
    #[serde(default = "holdout")]
    pub role: Role,
    pub count: usize,
}

fn holdout() -> Role {
    Role::Holdout
}

/// How to build the starting verifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Column name in reports; the backbone name when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default = "resnet50")]
    pub backbone: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_width: Option<usize>,
    /// Checkpoint to start from; overrides `backbone`, `resolution` and
    /// `head_width`. A representation checkpoint gets a fresh head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
}

fn resnet50() -> String {
    "resnet50".into()
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { id: None, backbone: resnet50(), resolution: None, head_width: None, init: None }
    }
}

impl ModelSection {
    pub fn model_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.backbone.clone())
    }
}

/// A training manifest with its identity split, read from `splits` or
/// drawn with `fractions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<PathBuf>,
    #[serde(default = "default_fractions")]
    pub fractions: (f64, f64),
}

/// A holdout manifest evaluated on a fixed pair list, read from `pairs` or
/// generated with `pair_count` pairs per dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoldoutSection {
    pub manifest: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PathBuf>,
    #[serde(default = "default_pair_count")]
    pub pair_count: usize,
}

fn default_pair_count() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(default)]
    pub model: ModelSection,
    pub datasets: Vec<DataSection>,
    #[serde(default)]
    pub params: PretrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    #[serde(default)]
    pub model: ModelSection,
    pub datasets: Vec<DataSection>,
    pub run: RunSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub checkpoints: Vec<PathBuf>,
    pub pairs: PathBuf,
    pub manifests: Vec<PathBuf>,
    #[serde(default = "bottleneck")]
    pub tap: Tap,
    #[serde(default)]
    pub ensemble: bool,
}

fn bottleneck() -> Tap {
    Tap::Bottleneck
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Benchmark1Section {
    pub train: DataSection,
    pub holdouts: Vec<HoldoutSection>,
    /// One report column per model.
    pub models: Vec<ModelSection>,
    pub run: RunSpec,
    #[serde(default = "bottleneck")]
    pub tap: Tap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Benchmark2Section {
    pub datasets: Vec<DataSection>,
    pub holdouts: Vec<HoldoutSection>,
    #[serde(default)]
    pub model: ModelSection,
    /// Contrastive pretraining of the shared representation; skipped when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainConfig>,
    /// Runs in any order; a run starts from the best weights of the run
    /// named by its `base_checkpoint`, or from the representation.
    pub runs: Vec<RunSpec>,
    #[serde(default = "three")]
    pub ensemble_size: usize,
    /// Minimum validation precision for the checkpoint candidate list.
    #[serde(default = "ninety")]
    pub precision_filter: f64,
    #[serde(default = "bottleneck")]
    pub tap: Tap,
}

fn three() -> usize {
    3
}

fn ninety() -> f64 {
    0.90
}

/// A finetuning config given either in full or as `preset = "FT1"` plus
/// overriding keys. Serialises as the resolved config.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec(pub FinetuneConfig);

impl RunSpec {
    pub fn resolve(mut table: toml::Table) -> Result<Self, String> {
        if let Some(preset) = table.remove("preset") {
            let name = preset.as_str().ok_or("preset must be a string")?;
            let base = FinetuneConfig::preset(name).map_err(|e| e.to_string())?;
            let mut merged = toml::Table::try_from(&base).map_err(|e| e.to_string())?;
            merged.extend(table);
            table = merged;
        }
        FinetuneConfig::deserialize(toml::Value::Table(table)).map(RunSpec).map_err(|e| e.to_string())
    }
}

impl Serialize for RunSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RunSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        RunSpec::resolve(toml::Table::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        let mut config = Self::parse(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.anchor(&base);
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Makes every relative path relative to `base` instead.
    pub fn anchor(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_data = |d: &mut DataSection| {
            fix(&mut d.manifest);
            d.splits.as_mut().map(fix);
        };
        let fix_holdout = |h: &mut HoldoutSection| {
            fix(&mut h.manifest);
            h.pairs.as_mut().map(fix);
        };
        let fix_model = |m: &mut ModelSection| {
            m.init.as_mut().map(fix);
        };
        self.paths.data_root.as_mut().map(fix);
        self.paths.run_dir.as_mut().map(fix);
        if let Some(s) = &mut self.mask {
            fix(&mut s.manifest);
            s.params.detector_weights.as_mut().map(fix);
            s.params.landmark_weights.as_mut().map(fix);
        }
        if let Some(s) = &mut self.split {
            fix(&mut s.manifest);
        }
        if let Some(s) = &mut self.pairs {
            fix(&mut s.manifest);
            s.splits.as_mut().map(fix);
        }
        if let Some(s) = &mut self.pretrain {
            fix_model(&mut s.model);
            s.datasets.iter_mut().for_each(fix_data);
        }
        if let Some(s) = &mut self.finetune {
            fix_model(&mut s.model);
            s.datasets.iter_mut().for_each(fix_data);
        }
        if let Some(s) = &mut self.evaluate {
            s.checkpoints.iter_mut().for_each(fix);
            fix(&mut s.pairs);
            s.manifests.iter_mut().for_each(fix);
        }
        if let Some(s) = &mut self.benchmark1 {
            fix_data(&mut s.train);
            s.holdouts.iter_mut().for_each(fix_holdout);
            s.models.iter_mut().for_each(fix_model);
        }
        if let Some(s) = &mut self.benchmark2 {
            s.datasets.iter_mut().for_each(fix_data);
            s.holdouts.iter_mut().for_each(fix_holdout);
            fix_model(&mut s.model);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_take_overrides() {
        let c = RunConfig::parse(
            r#"
            seed = 3
            [benchmark2]
            datasets = [{ manifest = "a.csv" }, { manifest = "b.csv", fractions = [0.5, 0.25] }]
            holdouts = [{ manifest = "h.csv" }]
            runs = [{ preset = "FT2", iterations = 7, batch_size = 4 }, { preset = "CP1", iterations = 3 }]
            "#,
        )
        .unwrap();
        let b = c.benchmark2.unwrap();
        let ft2 = &b.runs[0].0;
        assert_eq!((ft2.name.as_str(), ft2.iterations, ft2.batch_size, ft2.learning_rate), ("FT2", 7, 4, 0.01));
        assert_eq!(ft2.base_checkpoint.as_deref(), Some("CP1"));
        assert_eq!(b.runs[1].0.base_checkpoint, None);
        assert_eq!(b.datasets[1].fractions, (0.5, 0.25));
        assert_eq!(b.ensemble_size, 3);
        assert_eq!(b.tap, Tap::Bottleneck);
    }

    #[test]
    fn resolved_form_round_trips() {
        let mut c = RunConfig::parse(
            r#"
            [finetune]
            datasets = [{ manifest = "train.csv" }]
            run = { preset = "FT1", iterations = 5 }
            [finetune.model]
            backbone = "tiny_cnn"
            resolution = 24
            "#,
        )
        .unwrap();
        c.anchor(Path::new("/cfg"));
        assert_eq!(c.finetune.as_ref().unwrap().datasets[0].manifest, PathBuf::from("/cfg/train.csv"));
        let again = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn bundled_configs_parse() {
        for text in [
            include_str!("../../../configs/finetune.toml"),
            include_str!("../../../configs/benchmark1.toml"),
            include_str!("../../../configs/benchmark2.toml"),
        ] {
            let c = RunConfig::parse(text).unwrap();
            assert!(c.paths.run_dir.is_some());
            assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn unknown_keys_and_presets_are_rejected() {
        assert!(RunConfig::parse("sed = 1").is_err());
        assert!(RunConfig::parse("[finetune]\ndatasets = []\nrun = { preset = \"FT9\" }").is_err());
        assert!(RunConfig::parse("[finetune]\ndatasets = []\nrun = { preset = \"FT1\", lr = 2 }").is_err());
    }
}
