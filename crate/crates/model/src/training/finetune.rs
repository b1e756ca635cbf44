//! Supervised Siamese finetuning with BCE, layer freezing, dataset draws,
//! optional hard-imposter mining and periodic validation.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use maskmatch_core::metrics::validation_precision;
use maskmatch_core::pairs::{Label, PairPool, PairSampler};
use maskmatch_core::registry::{DatasetIndex, Role, Splits};
use maskmatch_core::rng::{derive_seed, seeded};
use maskmatch_core::scoring::PairScorer;
use serde::{Deserialize, Serialize};

use super::config::FinetuneConfig;
use super::optim::{bce_with_logits, Sgd};
use crate::checkpoint::save_verifier;
use crate::error::{ModelError, Result};
use crate::scorer::{ImageStore, ModelScorer};
use crate::verifier::{Lineage, VerifierModel};

/// One validation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrailEntry {
    pub step: u64,
    pub precision: f64,
    pub checkpoint_id: String,
    /// Precision reached the retention threshold and the weights were kept.
    pub retained: bool,
    pub path: Option<PathBuf>,
}

pub struct TrainingRun {
    pub config: FinetuneConfig,
    /// Validation events in step order.
    pub trail: Vec<TrailEntry>,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Dataset id of every training pair, in draw order.
    pub pair_log: Vec<String>,
    pub model: VerifierModel,
    /// Weights at the first validation with the highest precision.
    pub best: Option<(TrailEntry, VerifierModel)>,
}

impl TrainingRun {
    pub fn retained(&self) -> impl Iterator<Item = &TrailEntry> {
        self.trail.iter().filter(|e| e.retained)
    }
}

/// Training and validation pools plus the images they refer to.
pub struct PairData<'a> {
    pub train: PairPool,
    pub validation: PairPool,
    pub images: &'a ImageStore,
}

impl<'a> PairData<'a> {
    pub fn from_splits(index: &DatasetIndex, splits: &Splits, images: &'a ImageStore) -> Self {
        Self {
            train: PairPool::for_role(index, splits, Role::Train),
            validation: PairPool::for_role(index, splits, Role::Validation),
            images,
        }
    }
}

/// Sets the frozen fraction, checking it lies in [0, 1].
pub fn freeze_fraction(mut model: VerifierModel, p: f64) -> Result<VerifierModel> {
    model.set_frozen_fraction(p)?;
    Ok(model)
}

/// Training-mode BCE of a batch of pairs (labels 1 authentic, 0 imposter).
pub fn batch_loss(model: &VerifierModel, refs: &Tensor, probes: &Tensor, labels: &[f64]) -> Result<Tensor> {
    let y = Tensor::from_vec(labels.to_vec(), labels.len(), &Device::Cpu)?.to_dtype(model.dtype())?;
    let logits = model.pair_logits(refs, probes, model.train_mode())?;
    bce_with_logits(&logits, &y)
}

/// One optimiser step on a batch; returns the loss before the update.
pub fn train_step(model: &VerifierModel, sgd: &mut Sgd, refs: &Tensor, probes: &Tensor, labels: &[f64]) -> Result<f64> {
    let loss = batch_loss(model, refs, probes, labels)?;
    let grads = loss.backward()?;
    sgd.step(&model.trainable_params(), &grads)?;
    Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

struct InputCache<'a> {
    images: &'a ImageStore,
    data: HashMap<String, Vec<f32>>,
}

impl InputCache<'_> {
    fn batch(&mut self, model: &VerifierModel, ids: &[&str]) -> Result<Tensor> {
        for id in ids {
            if !self.data.contains_key(*id) {
                let img = self.images.get(id)?;
                self.data.insert(id.to_string(), model.preprocess(&img));
            }
        }
        let rows: Vec<&[f32]> = ids.iter().map(|id| self.data[*id].as_slice()).collect();
        model.input_tensor(&rows)
    }
}

struct RunLog {
    file: Option<BufWriter<File>>,
}

impl RunLog {
    fn open(run_dir: Option<&Path>, config: &FinetuneConfig) -> Result<Self> {
        let Some(dir) = run_dir else { return Ok(Self { file: None }) };
        fs::create_dir_all(dir).map_err(|e| ModelError::io(dir, e))?;
        let cfg = dir.join(format!("{}.config.json", config.name));
        fs::write(&cfg, serde_json::to_string_pretty(config).expect("config serialises")).map_err(|e| ModelError::io(&cfg, e))?;
        let path = dir.join(format!("{}.log.jsonl", config.name));
        let file = File::create(&path).map_err(|e| ModelError::io(&path, e))?;
        Ok(Self { file: Some(BufWriter::new(file)) })
    }

    fn record(&mut self, step: u64, loss: f64, precision: Option<f64>) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::json!({ "step": step, "loss": loss, "precision": precision });
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| ModelError::io("run log", e))?;
        }
        Ok(())
    }
}

/// Optimises BCE between the sigmoid of the pair logit and the pair label.
///
/// Validation runs every `validation_interval` steps and after the last
/// one, always on the same seeded trials. Weights whose precision reaches
/// the retention threshold are written to `run_dir/checkpoints` when a run
/// directory is given.
pub fn finetune_supervised(
    mut model: VerifierModel,
    config: &FinetuneConfig,
    data: &PairData<'_>,
    run_dir: Option<&Path>,
) -> Result<TrainingRun> {
    config.validate()?;
    model.set_frozen_fraction(config.frozen_fraction)?;
    let base = config.base_checkpoint.clone().or_else(|| {
        let from = model.lineage();
        Some(from.checkpoint_id.clone()).filter(|s| !s.is_empty()).or_else(|| from.base.clone())
    });
    model.set_lineage(Lineage { checkpoint_id: config.name.clone(), base: base.clone(), step: 0 });

    let mut sampler = PairSampler::new(
        data.train.clone(),
        config.draw_strategy,
        config.authentic_probability,
        config.hard_sample_size,
        derive_seed(config.seed, "training_pairs"),
    )?;
    let mut sgd = Sgd::plain(config.learning_rate);
    let mut inputs = InputCache { images: data.images, data: HashMap::new() };
    let mut log = RunLog::open(run_dir, config)?;
    let mut trail = Vec::new();
    let mut losses = Vec::with_capacity(config.iterations as usize);
    let mut best: Option<(TrailEntry, VerifierModel)> = None;
    let mut snapshot: Option<VerifierModel> = None;

    for step in 1..=config.iterations {
        let batch = if config.hard_sample_size.is_some() {
            let miner = if config.mining_refresh == 1 {
                &model
            } else {
                if snapshot.is_none() || (step - 1) % config.mining_refresh == 0 {
                    snapshot = Some(model.deep_clone()?);
                }
                snapshot.as_ref().expect("snapshot just refreshed")
            };
            let scorer = ModelScorer::new(miner, data.images, config.mining_tap)?;
            sampler.next_batch(config.batch_size, Some(&scorer as &dyn PairScorer))?
        } else {
            sampler.next_batch(config.batch_size, None)?
        };
        let refs: Vec<&str> = batch.iter().map(|p| p.reference.as_str()).collect();
        let probes: Vec<&str> = batch.iter().map(|p| p.probe.as_str()).collect();
        let labels: Vec<f64> = batch.iter().map(|p| if p.label == Label::Authentic { 1.0 } else { 0.0 }).collect();
        let x_ref = inputs.batch(&model, &refs)?;
        let x_probe = inputs.batch(&model, &probes)?;
        let loss = train_step(&model, &mut sgd, &x_ref, &x_probe, &labels)?;
        losses.push(loss);

        let mut precision = None;
        if step % config.validation_interval == 0 || step == config.iterations {
            let scorer = ModelScorer::new(&model, data.images, config.validation_tap)?;
            let mut rng = seeded(derive_seed(config.seed, "validation"));
            let p = validation_precision(&scorer, &data.validation, config.validation_steps, config.imposters_per_step, &mut rng)?;
            precision = Some(p.precision);
            let id = format!("{}@{step}", config.name);
            let retained = p.precision >= config.retention_threshold;
            model.set_lineage(Lineage { checkpoint_id: id.clone(), base: base.clone(), step });
            let path = match run_dir {
                Some(dir) if retained => {
                    let path = dir.join("checkpoints").join(format!("{}_step{step:07}.safetensors", config.name));
                    save_verifier(&model, &path)?;
                    Some(path)
                }
                _ => None,
            };
            let entry = TrailEntry { step, precision: p.precision, checkpoint_id: id, retained, path };
            log::info!("{} step {step}: loss {loss:.4}, validation precision {:.3}", config.name, p.precision);
            if best.as_ref().is_none_or(|(b, _)| p.precision > b.precision) {
                best = Some((entry.clone(), model.deep_clone()?));
            }
            trail.push(entry);
        }
        log.record(step, loss, precision)?;
    }

    Ok(TrainingRun { config: config.clone(), trail, losses, pair_log: sampler.log().to_vec(), model, best })
}

/// One dataset's index with its identity split.
pub struct DatasetSplit<'a> {
    pub index: &'a DatasetIndex,
    pub splits: &'a Splits,
}

/// Finetuning over several datasets; the dataset of every pair is chosen
/// by the config's draw strategy.
pub fn multi_dataset_finetune(
    model: VerifierModel,
    config: &FinetuneConfig,
    datasets: &[DatasetSplit<'_>],
    images: &ImageStore,
    run_dir: Option<&Path>,
) -> Result<TrainingRun> {
    if datasets.is_empty() {
        return Err(ModelError::Config("multi-dataset finetuning needs at least one dataset".into()));
    }
    let data = PairData {
        train: PairPool::merged(datasets.iter().map(|d| PairPool::for_role(d.index, d.splits, Role::Train))),
        validation: PairPool::merged(datasets.iter().map(|d| PairPool::for_role(d.index, d.splits, Role::Validation))),
        images,
    };
    finetune_supervised(model, config, &data, run_dir)
}
