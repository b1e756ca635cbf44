//! Shared-weight Siamese verifier: backbone embedding, a sigmoid layer over
//! the absolute embedding difference, and a single linear output.

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use maskmatch_core::scoring::Tap;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec};
use crate::error::{ModelError, Result};
use crate::layers::{Act, Linear, Mode};
use crate::params::{Builder, Owner, Param, ParamKind};
use crate::preprocess::{preprocess, Normalization};

pub const DEFAULT_HEAD_WIDTH: usize = 512;

fn default_head_width() -> usize {
    DEFAULT_HEAD_WIDTH
}

/// Where the 512-level tap reads the head activations of each branch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fc512Point {
    #[default]
    PostSigmoid,
    PreSigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierSpec {
    pub backbone: BackboneSpec,
    #[serde(default = "default_head_width")]
    pub head_width: usize,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub fc512_point: Fc512Point,
}

impl VerifierSpec {
    pub fn new(backbone: BackboneSpec) -> Self {
        Self { backbone, head_width: DEFAULT_HEAD_WIDTH, normalization: Normalization::default(), fc512_point: Fc512Point::default() }
    }

    pub fn embedding_dim(&self) -> usize {
        self.backbone.embedding_dim()
    }
}

/// Where a set of weights came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub checkpoint_id: String,
    /// Checkpoint this one was trained from, if any.
    pub base: Option<String>,
    pub step: u64,
}

/// 1/(1+d) for a non-negative distance.
pub fn distance_to_similarity(d: f64) -> Result<f64> {
    if d.is_nan() || d < 0.0 {
        return Err(ModelError::Domain(format!("distance {d} is not a non-negative number")));
    }
    Ok(1.0 / (1.0 + d))
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Head parameters copied out as f64 for inference. Scoring runs here
/// rather than through the tensor graph so that every pair is computed by
/// the same sequential arithmetic, whatever the batch.
#[derive(Debug, Clone)]
pub struct HeadWeights {
    width: usize,
    dim: usize,
    fc_w: Vec<f64>,
    fc_b: Vec<f64>,
    out_w: Vec<f64>,
    out_b: f64,
    point: Fc512Point,
}

/// Per-image quantities every tap is computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub embedding: Vec<f64>,
    /// This branch's 512-level activations, W e + b through the sigmoid
    /// unless `fc512_point` taps before it.
    pub fc: Vec<f64>,
}

impl HeadWeights {
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        (0..self.width)
            .map(|j| {
                let row = &self.fc_w[j * self.dim..(j + 1) * self.dim];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.fc_b[j]
            })
            .collect()
    }

    pub fn features(&self, embedding: Vec<f64>) -> Features {
        let mut fc = self.affine(&embedding);
        if self.point == Fc512Point::PostSigmoid {
            fc.iter_mut().for_each(|v| *v = logistic(*v));
        }
        Features { embedding, fc }
    }

    /// Linear output before the inference-time sigmoid.
    pub fn logit(&self, a: &[f64], b: &[f64]) -> f64 {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
        let h = self.affine(&diff);
        h.iter().zip(&self.out_w).map(|(v, w)| logistic(*v) * w).sum::<f64>() + self.out_b
    }

    pub fn similarity(&self, tap: Tap, a: &Features, b: &Features) -> Result<f64> {
        match tap {
            Tap::Final => Ok(logistic(self.logit(&a.embedding, &b.embedding))),
            Tap::Fc512 => distance_to_similarity(l2(&a.fc, &b.fc)),
            Tap::Bottleneck => distance_to_similarity(l2(&a.embedding, &b.embedding)),
        }
    }
}

pub struct VerifierModel {
    spec: VerifierSpec,
    dtype: DType,
    backbone: Backbone,
    fc: Linear,
    out: Linear,
    params: Vec<Param>,
    frozen_fraction: f64,
    frozen_layers: usize,
    lineage: Lineage,
}

impl std::fmt::Debug for VerifierModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VerifierModel")
            .field("architecture", &self.spec.backbone.architecture_name())
            .field("embedding_dim", &self.embedding_dim())
            .field("frozen_fraction", &self.frozen_fraction)
            .field("lineage", &self.lineage)
            .finish()
    }
}

impl VerifierModel {
    /// Randomly initialised f32 model.
    pub fn new(spec: VerifierSpec, seed: u64) -> Result<Self> {
        Self::with_dtype(spec, seed, DType::F32)
    }

    pub fn with_dtype(spec: VerifierSpec, seed: u64, dtype: DType) -> Result<Self> {
        if spec.head_width == 0 {
            return Err(ModelError::Config("head_width must be positive".into()));
        }
        let mut b = Builder::new(seed, dtype);
        let backbone = Backbone::build(&mut b, &spec.backbone)?;
        let dim = spec.embedding_dim();
        let fc = Linear::new(&mut b, "head.fc512", Owner::Head, dim, spec.head_width, Act::Identity)?;
        let out = Linear::new(&mut b, "head.out", Owner::Head, spec.head_width, 1, Act::Identity)?;
        Ok(Self {
            spec,
            dtype,
            backbone,
            fc,
            out,
            params: b.finish(),
            frozen_fraction: 0.0,
            frozen_layers: 0,
            lineage: Lineage::default(),
        })
    }

    pub fn spec(&self) -> &VerifierSpec {
        &self.spec
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim()
    }

    pub fn input_resolution(&self) -> u32 {
        self.spec.backbone.input_resolution
    }

    /// Parameterised backbone layers, in forward order.
    pub fn layer_count(&self) -> usize {
        self.backbone.layer_count()
    }

    /// All weights and buffers in forward order.
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn lineage(&self) -> &Lineage {
        &self.lineage
    }

    pub fn set_lineage(&mut self, lineage: Lineage) {
        self.lineage = lineage;
    }

    pub fn frozen_fraction(&self) -> f64 {
        self.frozen_fraction
    }

    /// Number of leading backbone layers that receive no updates.
    pub fn frozen_layers(&self) -> usize {
        self.frozen_layers
    }

    /// Freezes the first floor(p * L) backbone layers; the head always
    /// stays trainable.
    pub fn set_frozen_fraction(&mut self, p: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&p) {
            return Err(ModelError::Domain(format!("frozen fraction {p} outside [0, 1]")));
        }
        self.frozen_fraction = p;
        self.frozen_layers = (p * self.layer_count() as f64).floor() as usize;
        Ok(())
    }

    pub(crate) fn train_mode(&self) -> Mode {
        Mode { train: true, frozen_layers: self.frozen_layers }
    }

    /// Weights an optimiser may update under the current freezing.
    pub fn trainable_params(&self) -> Vec<&Param> {
        let mode = self.train_mode();
        self.params.iter().filter(|p| p.kind == ParamKind::Weight && mode.learns(p.owner)).collect()
    }

    pub(crate) fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Normalised CHW floats for one image at this model's resolution.
    pub fn preprocess(&self, image: &RgbImage) -> Vec<f32> {
        preprocess(image, self.input_resolution(), &self.spec.normalization)
    }

    /// Stacks preprocessed images into an NCHW tensor.
    pub fn input_tensor(&self, images: &[&[f32]]) -> Result<Tensor> {
        let r = self.input_resolution() as usize;
        let per = 3 * r * r;
        let mut data = Vec::with_capacity(images.len() * per);
        for img in images {
            if img.len() != per {
                return Err(ModelError::ShapeMismatch { expected: format!("{per} values"), actual: format!("{} values", img.len()) });
            }
            data.extend_from_slice(img);
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, r, r), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let r = self.input_resolution() as usize;
        match x.dims() {
            [_, 3, h, w] if *h == r && *w == r => Ok(()),
            dims => Err(ModelError::ShapeMismatch { expected: format!("[N, 3, {r}, {r}]"), actual: format!("{dims:?}") }),
        }
    }

    /// Inference-mode embeddings of an NCHW batch.
    pub fn embed_input(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let e = self.backbone.forward(x, Mode::EVAL)?;
        Ok(e.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    /// Embedding of one image, computed on its own so that it depends on
    /// nothing but the image and the weights.
    pub fn embed(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let data = self.preprocess(image);
        let x = self.input_tensor(&[&data])?;
        Ok(self.embed_input(&x)?.remove(0))
    }

    pub fn head_weights(&self) -> Result<HeadWeights> {
        let flat = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?) };
        Ok(HeadWeights {
            width: self.spec.head_width,
            dim: self.embedding_dim(),
            fc_w: flat(self.fc.weight().as_tensor())?,
            fc_b: flat(self.fc.bias().as_tensor())?,
            out_w: flat(self.out.weight().as_tensor())?,
            out_b: flat(self.out.bias().as_tensor())?[0],
            point: self.spec.fc512_point,
        })
    }

    pub fn features(&self, image: &RgbImage) -> Result<Features> {
        Ok(self.head_weights()?.features(self.embed(image)?))
    }

    /// Similarity of a reference and a probe image at one tap.
    pub fn similarity(&self, reference: &RgbImage, probe: &RgbImage, tap: Tap) -> Result<f64> {
        let head = self.head_weights()?;
        let a = head.features(self.embed(reference)?);
        let b = head.features(self.embed(probe)?);
        head.similarity(tap, &a, &b)
    }

    /// Training-graph logits for a batch of pairs. Both halves run through
    /// one backbone call, so they share parameters and batch statistics.
    pub(crate) fn pair_logits(&self, refs: &Tensor, probes: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(refs)?;
        self.check_input(probes)?;
        let n = refs.dim(0)?;
        let x = Tensor::cat(&[refs, probes], 0)?;
        let e = self.backbone.forward(&x, mode)?;
        let diff = (e.narrow(0, 0, n)? - e.narrow(0, n, n)?)?.abs()?;
        let h = crate::layers::sigmoid(&self.fc.forward(&diff, mode)?)?;
        Ok(self.out.forward(&h, mode)?.squeeze(1)?)
    }

    /// Independent copy of the weights, freezing and lineage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut m = Self::with_dtype(self.spec.clone(), 0, self.dtype)?;
        for (dst, src) in m.params.iter().zip(&self.params) {
            dst.var.set(&src.var.as_tensor().copy()?)?;
        }
        m.frozen_fraction = self.frozen_fraction;
        m.frozen_layers = self.frozen_layers;
        m.lineage = self.lineage.clone();
        Ok(m)
    }

    /// Overwrites one named tensor, checking its shape.
    pub fn set_param(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self.param(name).ok_or_else(|| ModelError::Config(format!("no parameter named {name:?}")))?;
        if p.var.dims() != value.dims() {
            return Err(ModelError::ShapeMismatch { expected: format!("{:?}", p.var.dims()), actual: format!("{:?}", value.dims()) });
        }
        p.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// Mean of member bottleneck similarities.
pub struct EnsembleModel {
    members: Vec<VerifierModel>,
}

impl EnsembleModel {
    pub fn new(members: Vec<VerifierModel>) -> Result<Self> {
        if members.is_empty() {
            return Err(ModelError::Config("an ensemble needs at least one member".into()));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[VerifierModel] {
        &self.members
    }

    pub fn similarity(&self, reference: &RgbImage, probe: &RgbImage) -> Result<f64> {
        if let [only] = self.members.as_slice() {
            return only.similarity(reference, probe, Tap::Bottleneck);
        }
        let mut sum = 0.0;
        for m in &self.members {
            sum += m.similarity(reference, probe, Tap::Bottleneck)?;
        }
        Ok(sum / self.members.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Architecture;

    fn toy(widths: Vec<usize>, head_width: usize) -> VerifierSpec {
        VerifierSpec {
            backbone: BackboneSpec { architecture: Architecture::Mlp { widths }, input_resolution: 1 },
            head_width,
            normalization: Normalization::identity(),
            fc512_point: Fc512Point::PostSigmoid,
        }
    }

    #[test]
    fn similarity_mapping() {
        assert_eq!(distance_to_similarity(0.0).unwrap(), 1.0);
        assert_eq!(distance_to_similarity(1.0).unwrap(), 0.5);
        assert_eq!(distance_to_similarity(3.0).unwrap(), 0.25);
        assert!(matches!(distance_to_similarity(-1e-12), Err(ModelError::Domain(_))));
        assert!(distance_to_similarity(f64::NAN).is_err());
        let grid: Vec<f64> = (0..1000).map(|i| distance_to_similarity(i as f64 * 0.01).unwrap()).collect();
        assert!(grid.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn parameter_names_and_layers() {
        let m = VerifierModel::new(toy(vec![4, 3], 2), 1).unwrap();
        let names: Vec<_> = m.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "backbone.000.weight",
                "backbone.000.bias",
                "backbone.001.weight",
                "backbone.001.bias",
                "head.fc512.weight",
                "head.fc512.bias",
                "head.out.weight",
                "head.out.bias"
            ]
        );
        assert_eq!(m.layer_count(), 2);
        assert_eq!(m.param("head.fc512.weight").unwrap().var.dims(), [2, 3]);
    }

    #[test]
    fn freezing_counts_backbone_layers_only() {
        let mut m = VerifierModel::new(toy(vec![2; 10], 2), 1).unwrap();
        m.set_frozen_fraction(0.5).unwrap();
        assert_eq!(m.frozen_layers(), 5);
        let trainable: Vec<_> = m.trainable_params().iter().map(|p| p.name.clone()).collect();
        assert_eq!(trainable.len(), 5 * 2 + 4);
        assert_eq!(trainable[0], "backbone.005.weight");
        m.set_frozen_fraction(1.0).unwrap();
        assert!(m.trainable_params().iter().all(|p| p.owner == Owner::Head));
        m.set_frozen_fraction(0.0).unwrap();
        assert_eq!(m.trainable_params().len(), m.params().len());
        assert!(matches!(m.set_frozen_fraction(1.5), Err(ModelError::Domain(_))));
        assert!(m.set_frozen_fraction(-0.1).is_err());
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let m = VerifierModel::new(toy(vec![2], 2), 1).unwrap();
        let x = Tensor::zeros((1, 3, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.embed_input(&x), Err(ModelError::ShapeMismatch { .. })));
        assert!(m.input_tensor(&[&[0.0; 5]]).is_err());
    }

    #[test]
    fn graph_logits_match_inference_head() {
        let m = VerifierModel::with_dtype(toy(vec![5, 4], 3), 7, DType::F64).unwrap();
        let a = [0.3f32, -0.2, 0.9];
        let b = [-0.5f32, 0.1, 0.4];
        let refs = m.input_tensor(&[&a]).unwrap();
        let probes = m.input_tensor(&[&b]).unwrap();
        let z = m.pair_logits(&refs, &probes, Mode::EVAL).unwrap().to_vec1::<f64>().unwrap()[0];
        let head = m.head_weights().unwrap();
        let ea = m.embed_input(&refs).unwrap().remove(0);
        let eb = m.embed_input(&probes).unwrap().remove(0);
        assert!((head.logit(&ea, &eb) - z).abs() < 1e-12);
    }

    #[test]
    fn deep_clone_is_independent() {
        let m = VerifierModel::new(toy(vec![3], 2), 3).unwrap();
        let c = m.deep_clone().unwrap();
        let w = &m.param("backbone.000.weight").unwrap().var;
        w.set(&w.as_tensor().zeros_like().unwrap()).unwrap();
        let cw = c.param("backbone.000.weight").unwrap().var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(cw.iter().any(|v| *v != 0.0));
    }
}
