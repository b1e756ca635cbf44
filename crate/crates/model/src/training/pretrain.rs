//! Momentum-contrast instance discrimination: an online encoder learns to
//! match each image's second view, encoded by a slowly moving copy of
//! itself, against a FIFO queue of past keys.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use maskmatch_core::rng::{derive_seed, seeded, Rng};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use super::augment::augment;
use super::config::PretrainConfig;
use super::optim::Sgd;
use crate::checkpoint::save_representation;
use crate::error::{ModelError, Result};
use crate::layers::{Act, Linear, Mode};
use crate::params::{Builder, Owner, Param, ParamKind};
use crate::scorer::ImageStore;
use crate::verifier::{Lineage, VerifierModel};

/// Fixed-size ring of unit-norm keys; each enqueue overwrites the oldest.
#[derive(Debug, Clone)]
pub struct KeyQueue {
    keys: Vec<Vec<f32>>,
    next: usize,
}

impl KeyQueue {
    /// Queue filled with random unit vectors, so it is full from the start.
    pub fn random(size: usize, dim: usize, rng: &mut Rng) -> Self {
        let keys = (0..size)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| (x / n) as f32).collect()
            })
            .collect();
        Self { keys, next: 0 }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn enqueue(&mut self, keys: &[Vec<f32>]) {
        for k in keys {
            self.keys[self.next] = k.clone();
            self.next = (self.next + 1) % self.keys.len();
        }
    }

    /// Keys from oldest to newest.
    pub fn oldest_first(&self) -> Vec<&[f32]> {
        (0..self.keys.len()).map(|i| self.keys[(self.next + i) % self.keys.len()].as_slice()).collect()
    }

    fn tensor(&self, dtype: DType) -> Result<Tensor> {
        let dim = self.keys.first().map_or(0, Vec::len);
        let flat: Vec<f32> = self.keys.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (self.keys.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Cross-entropy with the positive in column 0 of every row, averaged over
/// rows.
pub fn info_nce(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let lse = (logits.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()? + max)?;
    let positive = logits.narrow(1, 0, 1)?;
    Ok((lse - positive)?.mean_all()?)
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

struct Projection {
    hidden: Linear,
    out: Linear,
    params: Vec<Param>,
}

impl Projection {
    fn new(dim: usize, out: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut b = Builder::new(seed, dtype);
        let hidden = Linear::new(&mut b, "projection.0", Owner::Projection, dim, dim, Act::Relu)?;
        let out = Linear::new(&mut b, "projection.1", Owner::Projection, dim, out, Act::Identity)?;
        Ok(Self { hidden, out, params: b.finish() })
    }

    fn copy(&self, dtype: DType) -> Result<Self> {
        let dim = self.hidden.weight().dims()[1];
        let out = self.out.weight().dims()[0];
        let p = Self::new(dim, out, 0, dtype)?;
        for (dst, src) in p.params.iter().zip(&self.params) {
            dst.var.set(&src.var.as_tensor().copy()?)?;
        }
        Ok(p)
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(x, mode)?, mode)
    }
}

fn encode(model: &VerifierModel, proj: Option<&Projection>, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut e = model.backbone().forward(x, mode)?;
    if let Some(p) = proj {
        e = p.forward(&e, mode)?;
    }
    l2_normalize(&e)
}

/// Online encoder, momentum encoder, key queue and optimiser.
pub struct Moco {
    online: VerifierModel,
    online_proj: Option<Projection>,
    key: VerifierModel,
    key_proj: Option<Projection>,
    queue: KeyQueue,
    sgd: Sgd,
    temperature: f64,
    momentum: f64,
}

impl Moco {
    pub fn new(model: VerifierModel, config: &PretrainConfig) -> Result<Self> {
        config.validate()?;
        let dim = model.embedding_dim();
        let online_proj = if config.projection_head {
            Some(Projection::new(dim, config.projection_dim, derive_seed(config.seed, "projection"), model.dtype())?)
        } else {
            None
        };
        let key_dim = if config.projection_head { config.projection_dim } else { dim };
        let key_proj = online_proj.as_ref().map(|p| p.copy(model.dtype())).transpose()?;
        let key = model.deep_clone()?;
        let queue = KeyQueue::random(config.queue_size, key_dim, &mut seeded(derive_seed(config.seed, "queue")));
        Ok(Self {
            online: model,
            online_proj,
            key,
            key_proj,
            queue,
            sgd: Sgd::with_momentum(config.learning_rate, config.sgd_momentum, config.weight_decay),
            temperature: config.temperature,
            momentum: config.momentum_coefficient,
        })
    }

    pub fn queue(&self) -> &KeyQueue {
        &self.queue
    }

    pub fn online(&self) -> &VerifierModel {
        &self.online
    }

    fn weights<'a>(model: &'a VerifierModel, proj: Option<&'a Projection>) -> Vec<&'a Param> {
        model.params().iter().chain(proj.map_or(&[][..], |p| &p.params)).filter(|p| p.kind == ParamKind::Weight).collect()
    }

    /// Online encoder weights (backbone, then projection head).
    pub fn online_weights(&self) -> Vec<&Param> {
        Self::weights(&self.online, self.online_proj.as_ref())
    }

    /// Momentum encoder weights, aligned with `online_weights`.
    pub fn key_weights(&self) -> Vec<&Param> {
        Self::weights(&self.key, self.key_proj.as_ref())
    }

    /// One update from a batch of query views and the matching key views;
    /// returns the contrastive loss before the update.
    pub fn step(&mut self, queries: &Tensor, keys: &Tensor) -> Result<f64> {
        let q = encode(&self.online, self.online_proj.as_ref(), queries, self.online.train_mode())?;
        let key_mode = Mode { train: true, frozen_layers: 0 };
        let k = encode(&self.key, self.key_proj.as_ref(), keys, key_mode)?.detach();
        let positive = (&q * &k)?.sum_keepdim(1)?;
        let negatives = q.matmul(&self.queue.tensor(q.dtype())?.t()?)?;
        let logits = (Tensor::cat(&[&positive, &negatives], 1)? / self.temperature)?;
        let loss = info_nce(&logits)?;
        let grads = loss.backward()?;
        let mode = self.online.train_mode();
        let trainable: Vec<&Param> =
            Self::weights(&self.online, self.online_proj.as_ref()).into_iter().filter(|p| mode.learns(p.owner)).collect();
        self.sgd.step(&trainable, &grads)?;

        let m = self.momentum;
        for (kp, qp) in Self::weights(&self.key, self.key_proj.as_ref()).into_iter().zip(Self::weights(&self.online, self.online_proj.as_ref())) {
            let updated = ((kp.var.as_tensor() * m)? + (qp.var.as_tensor() * (1.0 - m))?)?;
            kp.var.set(&updated)?;
        }
        let rows = k.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        self.queue.enqueue(&rows);
        Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    /// The online encoder; the projection head is dropped.
    pub fn into_model(self) -> VerifierModel {
        self.online
    }
}

pub struct PretrainRun {
    pub model: VerifierModel,
    pub losses: Vec<f64>,
}

/// Contrastive pretraining of `model`'s backbone over `image_ids`
/// (typically every masked and unmasked image of the training manifests).
/// With a run directory, the config, a loss log and the representation
/// checkpoint (`representation.safetensors`) are written there.
pub fn pretrain_contrastive(
    model: VerifierModel,
    config: &PretrainConfig,
    images: &ImageStore,
    image_ids: &[String],
    run_dir: Option<&Path>,
) -> Result<PretrainRun> {
    config.validate()?;
    if image_ids.is_empty() {
        return Err(ModelError::Config("pretraining needs at least one image".into()));
    }
    let size = model.input_resolution();
    let mut moco = Moco::new(model, config)?;
    let mut rng = seeded(derive_seed(config.seed, "pretrain"));
    let steps_per_epoch = image_ids.len().div_ceil(config.batch_size) as u64;
    let total = (config.epochs * steps_per_epoch).min(config.max_steps.unwrap_or(u64::MAX));
    let mut log = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| ModelError::io(dir, e))?;
            let cfg = dir.join("pretrain.config.json");
            fs::write(&cfg, serde_json::to_string_pretty(config).expect("config serialises")).map_err(|e| ModelError::io(&cfg, e))?;
            let path = dir.join("pretrain.log.jsonl");
            Some(BufWriter::new(File::create(&path).map_err(|e| ModelError::io(&path, e))?))
        }
        None => None,
    };

    let mut losses = Vec::new();
    let mut order: Vec<&String> = image_ids.iter().collect();
    'epochs: loop {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if losses.len() as u64 >= total {
                break 'epochs;
            }
            let mut qs = Vec::with_capacity(chunk.len());
            let mut ks = Vec::with_capacity(chunk.len());
            for id in chunk {
                let img = images.get(id)?;
                qs.push(moco.online.preprocess(&augment(&img, size, &config.augmentation, &mut rng)));
                ks.push(moco.online.preprocess(&augment(&img, size, &config.augmentation, &mut rng)));
            }
            let q = moco.online.input_tensor(&qs.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
            let k = moco.online.input_tensor(&ks.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
            let loss = moco.step(&q, &k)?;
            losses.push(loss);
            if let Some(f) = &mut log {
                let line = serde_json::json!({ "step": losses.len(), "loss": loss });
                writeln!(f, "{line}").map_err(|e| ModelError::io("pretrain log", e))?;
            }
        }
        if total == 0 {
            break;
        }
    }
    if let Some(f) = &mut log {
        f.flush().map_err(|e| ModelError::io("pretrain log", e))?;
    }
    let mut model = moco.into_model();
    model.set_lineage(Lineage { checkpoint_id: format!("pretrain@{}", losses.len()), base: None, step: losses.len() as u64 });
    if let Some(dir) = run_dir {
        save_representation(&model, dir.join("representation.safetensors"))?;
    }
    Ok(PretrainRun { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_of_class_count() {
        for k in [1usize, 8, 4096] {
            let logits = Tensor::ones((3, k + 1), DType::F64, &Device::Cpu).unwrap();
            let loss = info_nce(&(logits * 0.37).unwrap()).unwrap().to_scalar::<f64>().unwrap();
            assert!((loss - ((k + 1) as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn dominant_positive_drives_loss_to_zero() {
        let mut row = vec![0.0f64; 9];
        row[0] = 1e4;
        let logits = Tensor::from_vec(row, (1, 9), &Device::Cpu).unwrap();
        assert!(info_nce(&logits).unwrap().to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn queue_is_fifo_and_fixed_size() {
        let mut q = KeyQueue::random(4, 2, &mut seeded(1));
        assert!(q.oldest_first().iter().all(|k| ((k[0] * k[0] + k[1] * k[1]) - 1.0).abs() < 1e-6));
        let batch: Vec<Vec<f32>> = (0..3).map(|i| vec![i as f32, 0.0]).collect();
        q.enqueue(&batch);
        q.enqueue(&[vec![9.0, 9.0], vec![8.0, 8.0]]);
        assert_eq!(q.len(), 4);
        let order: Vec<f32> = q.oldest_first().iter().map(|k| k[0]).collect();
        assert_eq!(order, [1.0, 2.0, 9.0, 8.0]);
    }
}
