//! Convolution, batch norm and dense layers over named parameters.

use candle_core::{Tensor, Var, D};

use crate::error::Result;
use crate::params::{Builder, Init, Owner, ParamKind};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass settings. In training mode, backbone layers below
/// `frozen_layers` are detached from the graph and their batch norms use
/// running statistics, so nothing about them changes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Mode {
    pub train: bool,
    pub frozen_layers: usize,
}

impl Mode {
    pub const EVAL: Mode = Mode { train: false, frozen_layers: 0 };

    pub fn learns(&self, owner: Owner) -> bool {
        match owner {
            Owner::Backbone(i) => self.train && i >= self.frozen_layers,
            Owner::Head | Owner::Projection => self.train,
        }
    }

    pub fn use_var(&self, var: &Var, owner: Owner) -> Tensor {
        if self.learns(owner) {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        }
    }
}

/// Logistic function written through tanh so the backward pass never sees
/// an overflowing exponential.
pub(crate) fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Act {
    Identity,
    Relu,
    Relu6,
    Tanh,
}

impl Act {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Act::Identity => x.clone(),
            Act::Relu => x.relu()?,
            Act::Relu6 => x.relu()?.minimum(6.0)?,
            Act::Tanh => x.tanh()?,
        })
    }
}

pub(crate) struct BatchNorm {
    owner: Owner,
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, prefix: &str, channels: usize, owner: Owner) -> Result<Self> {
        Ok(Self {
            owner,
            gamma: b.add(format!("{prefix}.bn.gamma"), &[channels], Init::Const(1.0), ParamKind::Weight, owner)?,
            beta: b.add(format!("{prefix}.bn.beta"), &[channels], Init::Const(0.0), ParamKind::Weight, owner)?,
            running_mean: b.add(format!("{prefix}.bn.running_mean"), &[channels], Init::Const(0.0), ParamKind::Buffer, owner)?,
            running_var: b.add(format!("{prefix}.bn.running_var"), &[channels], Init::Const(1.0), ParamKind::Buffer, owner)?,
        })
    }

    /// Normalises an NCHW tensor per channel.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = x.dim(1)?;
        let shape = (1, c, 1, 1);
        let gamma = mode.use_var(&self.gamma, self.owner).reshape(shape)?;
        let beta = mode.use_var(&self.beta, self.owner).reshape(shape)?;
        let (mean, var) = if mode.learns(self.owner) {
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let n = x.elem_count() / c;
            let unbiased = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let rm = self.running_mean.as_tensor();
            let rv = self.running_var.as_tensor();
            self.running_mean.set(&((rm * (1.0 - BN_MOMENTUM))? + (mean.detach().flatten_all()? * BN_MOMENTUM)?)?)?;
            self.running_var
                .set(&((rv * (1.0 - BN_MOMENTUM))? + (var.detach().flatten_all()? * (BN_MOMENTUM * unbiased))?)?)?;
            (mean, var)
        } else {
            (self.running_mean.as_tensor().detach().reshape(shape)?, self.running_var.as_tensor().detach().reshape(shape)?)
        };
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(xhat.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

pub(crate) struct Conv {
    owner: Owner,
    weight: Var,
    bias: Option<Var>,
    bn: Option<BatchNorm>,
    stride: usize,
    padding: usize,
    groups: usize,
    act: Act,
}

pub(crate) struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub batch_norm: bool,
    pub act: Act,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, act: Act) -> Self {
        Self { c_in, c_out, kernel, stride, groups: 1, batch_norm: true, act }
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn plain(mut self) -> Self {
        self.batch_norm = false;
        self
    }
}

impl Conv {
    pub fn new(b: &mut Builder, index: usize, spec: ConvSpec) -> Result<Self> {
        let owner = Owner::Backbone(index);
        let prefix = format!("backbone.{index:03}");
        let fan_in = spec.c_in / spec.groups * spec.kernel * spec.kernel;
        let weight = b.add(
            format!("{prefix}.weight"),
            &[spec.c_out, spec.c_in / spec.groups, spec.kernel, spec.kernel],
            Init::KaimingNormal { fan_in },
            ParamKind::Weight,
            owner,
        )?;
        let (bias, bn) = if spec.batch_norm {
            (None, Some(BatchNorm::new(b, &prefix, spec.c_out, owner)?))
        } else {
            (Some(b.add(format!("{prefix}.bias"), &[spec.c_out], Init::Const(0.0), ParamKind::Weight, owner)?), None)
        };
        Ok(Self {
            owner,
            weight,
            bias,
            bn,
            stride: spec.stride,
            padding: spec.kernel / 2,
            groups: spec.groups,
            act: spec.act,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = mode.use_var(&self.weight, self.owner);
        let mut y = if self.groups == 1 {
            im2col_conv(x, &w, self.padding, self.stride)?
        } else {
            x.conv2d(&w, self.padding, self.stride, 1, self.groups)?
        };
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(&mode.use_var(bias, self.owner).reshape((1, (), 1, 1))?)?;
        }
        if let Some(bn) = &self.bn {
            y = bn.forward(&y, mode)?;
        }
        self.act.apply(&y)
    }
}

/// Convolution as patch extraction plus one matrix product. The backward
/// pass then reduces to copies and GEMMs, far cheaper on CPU than the
/// direct convolution gradient.
fn im2col_conv(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, _, k, _) = w.dims4()?;
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (wd + 2 * padding - k) / stride + 1;
    // Extra trailing zeros let every strided window span ho * stride rows.
    let extra = stride - 1;
    let xp = x.pad_with_zeros(2, padding, padding + extra)?.pad_with_zeros(3, padding, padding + extra)?;
    let mut patches = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            let mut p = xp.narrow(2, dy, ho * stride)?.narrow(3, dx, wo * stride)?;
            if stride > 1 {
                p = p.contiguous()?.reshape((n, c, ho, stride, wo, stride))?.narrow(3, 0, 1)?.narrow(5, 0, 1)?;
            }
            patches.push(p.reshape((n, c, 1, ho * wo))?);
        }
    }
    let cols = Tensor::cat(&patches, 2)?.reshape((n, c * k * k, ho * wo))?;
    let y = w.reshape((o, c * k * k))?.broadcast_matmul(&cols)?;
    Ok(y.reshape((n, o, ho, wo))?)
}

pub(crate) struct Linear {
    owner: Owner,
    weight: Var,
    bias: Var,
    act: Act,
}

impl Linear {
    pub fn new(b: &mut Builder, prefix: &str, owner: Owner, n_in: usize, n_out: usize, act: Act) -> Result<Self> {
        let init = if act == Act::Relu { Init::KaimingNormal { fan_in: n_in } } else { Init::FanInUniform { fan_in: n_in } };
        Ok(Self {
            owner,
            weight: b.add(format!("{prefix}.weight"), &[n_out, n_in], init, ParamKind::Weight, owner)?,
            bias: b.add(format!("{prefix}.bias"), &[n_out], Init::FanInUniform { fan_in: n_in }, ParamKind::Weight, owner)?,
            act,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = mode.use_var(&self.weight, self.owner);
        let b = mode.use_var(&self.bias, self.owner);
        let y = x.matmul(&w.t()?)?.broadcast_add(&b)?;
        self.act.apply(&y)
    }
}

/// Mean over the spatial axes of an NCHW tensor.
pub(crate) fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}
