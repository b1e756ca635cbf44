//! Named parameter storage shared by every layer of a model.

use candle_core::{DType, Device, Tensor, Var};
use maskmatch_core::rng::{seeded, Rng};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimised by gradient descent.
    Weight,
    /// Running statistics; never receives gradients.
    Buffer,
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    /// Parameterised backbone layer with this forward-order index.
    Backbone(usize),
    Head,
    Projection,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub kind: ParamKind,
    pub owner: Owner,
}

pub(crate) enum Init {
    /// He initialisation for layers followed by ReLU.
    KaimingNormal { fan_in: usize },
    /// U(-b, b), b = 1/sqrt(fan_in).
    FanInUniform { fan_in: usize },
    Const(f64),
}

/// Creates parameters in forward order and remembers them.
pub(crate) struct Builder {
    params: Vec<Param>,
    rng: Rng,
    dtype: DType,
    device: Device,
}

impl Builder {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { params: Vec::new(), rng: seeded(seed), dtype, device: Device::Cpu }
    }

    fn values(&mut self, n: usize, init: Init) -> Vec<f64> {
        match init {
            Init::KaimingNormal { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("finite std");
                (0..n).map(|_| normal.sample(&mut self.rng)).collect()
            }
            Init::FanInUniform { fan_in } => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-b..=b)).collect()
            }
            Init::Const(c) => vec![c; n],
        }
    }

    pub fn add(&mut self, name: String, shape: &[usize], init: Init, kind: ParamKind, owner: Owner) -> Result<Var> {
        let n = shape.iter().product();
        let data = self.values(n, init);
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.push(Param { name, var: var.clone(), kind, owner });
        Ok(var)
    }

    pub fn finish(self) -> Vec<Param> {
        self.params
    }
}
