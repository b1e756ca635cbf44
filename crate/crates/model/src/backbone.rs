//! Backbone presets. Every convolution and dense layer is one
//! "parameterised layer", numbered in forward order; batch norms belong to
//! the convolution they follow.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::layers::{global_avg_pool, Act, Conv, ConvSpec, Linear, Mode};
use crate::params::{Builder, Owner};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Architecture {
    /// 50-layer bottleneck residual network, 2048-d embedding.
    Resnet50,
    Vgg16,
    Vgg19,
    MobilenetV2,
    /// Small conv/bn/relu stack for desk-scale runs; one 2x2 max pool
    /// between consecutive widths.
    TinyCnn { widths: Vec<usize> },
    /// Dense tanh network over the flattened image; the last width is the
    /// embedding.
    Mlp { widths: Vec<usize> },
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Resnet50 => "resnet50",
            Architecture::Vgg16 => "vgg16",
            Architecture::Vgg19 => "vgg19",
            Architecture::MobilenetV2 => "mobilenet_v2",
            Architecture::TinyCnn { .. } => "tiny_cnn",
            Architecture::Mlp { .. } => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub architecture: Architecture,
    pub input_resolution: u32,
}

pub const PRESETS: [&str; 5] = ["resnet50", "vgg16", "vgg19", "mobilenet_v2", "tiny_cnn"];

impl BackboneSpec {
    /// A registered preset at its native input resolution.
    pub fn preset(name: &str) -> Result<Self> {
        let (architecture, input_resolution) = match name {
            "resnet50" => (Architecture::Resnet50, 224),
            "vgg16" => (Architecture::Vgg16, 224),
            "vgg19" => (Architecture::Vgg19, 224),
            "mobilenet_v2" => (Architecture::MobilenetV2, 224),
            "tiny_cnn" => (Architecture::TinyCnn { widths: vec![16, 32, 64] }, 32),
            other => return Err(ModelError::UnknownArchitecture(other.to_string())),
        };
        Ok(Self { architecture, input_resolution })
    }

    pub fn with_resolution(mut self, input_resolution: u32) -> Self {
        self.input_resolution = input_resolution;
        self
    }

    pub fn architecture_name(&self) -> &'static str {
        self.architecture.name()
    }

    pub fn embedding_dim(&self) -> usize {
        match &self.architecture {
            Architecture::Resnet50 => 2048,
            Architecture::Vgg16 | Architecture::Vgg19 => 4096,
            Architecture::MobilenetV2 => 1280,
            Architecture::TinyCnn { widths } | Architecture::Mlp { widths } => widths.last().copied().unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_resolution == 0 {
            return Err(ModelError::Config("input_resolution must be positive".into()));
        }
        match &self.architecture {
            Architecture::TinyCnn { widths } | Architecture::Mlp { widths } if widths.is_empty() || widths.contains(&0) => {
                Err(ModelError::Config(format!("{} needs non-empty positive widths", self.architecture_name())))
            }
            Architecture::TinyCnn { widths } if self.input_resolution >> (widths.len() - 1) == 0 => {
                Err(ModelError::Config("input too small for the pooling depth".into()))
            }
            _ => Ok(()),
        }
    }
}

enum Stage {
    Conv(Conv),
    MaxPool,
    Bottleneck { convs: [Conv; 3], shortcut: Option<Conv> },
    Inverted { expand: Option<Conv>, depthwise: Conv, project: Conv, residual: bool },
    GlobalPool,
    Flatten,
    Dense(Linear),
}

pub(crate) struct Backbone {
    stages: Vec<Stage>,
    layers: usize,
}

struct Counter<'a> {
    b: &'a mut Builder,
    next: usize,
}

impl Counter<'_> {
    fn conv(&mut self, spec: ConvSpec) -> Result<Conv> {
        let c = Conv::new(self.b, self.next, spec)?;
        self.next += 1;
        Ok(c)
    }

    fn dense(&mut self, n_in: usize, n_out: usize, act: Act) -> Result<Linear> {
        let l = Linear::new(self.b, &format!("backbone.{:03}", self.next), Owner::Backbone(self.next), n_in, n_out, act)?;
        self.next += 1;
        Ok(l)
    }
}

const VGG16: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
const VGG19: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256, 256], &[512, 512, 512, 512], &[512, 512, 512, 512]];
/// (expansion, channels, repeats, stride)
const MOBILENET_V2: [(usize, usize, usize, usize); 7] =
    [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)];

impl Backbone {
    pub fn build(b: &mut Builder, spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let mut c = Counter { b, next: 0 };
        let mut stages = Vec::new();
        match &spec.architecture {
            Architecture::Resnet50 => {
                stages.push(Stage::Conv(c.conv(ConvSpec::new(3, 64, 7, 2, Act::Relu))?));
                // Backward max pooling needs kernel == stride, so 2x2/2
                // stands in for the usual 3x3/2; output sizes match.
                stages.push(Stage::MaxPool);
                let mut c_in = 64;
                for (mid, repeats, stride) in [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)] {
                    let out = mid * 4;
                    for r in 0..repeats {
                        let s = if r == 0 { stride } else { 1 };
                        let convs = [
                            c.conv(ConvSpec::new(c_in, mid, 1, 1, Act::Relu))?,
                            c.conv(ConvSpec::new(mid, mid, 3, s, Act::Relu))?,
                            c.conv(ConvSpec::new(mid, out, 1, 1, Act::Identity))?,
                        ];
                        let shortcut =
                            if s != 1 || c_in != out { Some(c.conv(ConvSpec::new(c_in, out, 1, s, Act::Identity))?) } else { None };
                        stages.push(Stage::Bottleneck { convs, shortcut });
                        c_in = out;
                    }
                }
                stages.push(Stage::GlobalPool);
            }
            Architecture::Vgg16 | Architecture::Vgg19 => {
                let blocks = if spec.architecture == Architecture::Vgg16 { VGG16 } else { VGG19 };
                let mut c_in = 3;
                for block in blocks {
                    for &w in block {
                        stages.push(Stage::Conv(c.conv(ConvSpec::new(c_in, w, 3, 1, Act::Relu).plain())?));
                        c_in = w;
                    }
                    stages.push(Stage::MaxPool);
                }
                stages.push(Stage::GlobalPool);
                stages.push(Stage::Dense(c.dense(512, 4096, Act::Relu)?));
                stages.push(Stage::Dense(c.dense(4096, 4096, Act::Relu)?));
            }
            Architecture::MobilenetV2 => {
                stages.push(Stage::Conv(c.conv(ConvSpec::new(3, 32, 3, 2, Act::Relu6))?));
                let mut c_in = 32;
                for (t, ch, n, s) in MOBILENET_V2 {
                    for r in 0..n {
                        let stride = if r == 0 { s } else { 1 };
                        let hidden = c_in * t;
                        let expand = if t != 1 { Some(c.conv(ConvSpec::new(c_in, hidden, 1, 1, Act::Relu6))?) } else { None };
                        let depthwise = c.conv(ConvSpec::new(hidden, hidden, 3, stride, Act::Relu6).groups(hidden))?;
                        let project = c.conv(ConvSpec::new(hidden, ch, 1, 1, Act::Identity))?;
                        stages.push(Stage::Inverted { expand, depthwise, project, residual: stride == 1 && c_in == ch });
                        c_in = ch;
                    }
                }
                stages.push(Stage::Conv(c.conv(ConvSpec::new(c_in, 1280, 1, 1, Act::Relu6))?));
                stages.push(Stage::GlobalPool);
            }
            Architecture::TinyCnn { widths } => {
                let mut c_in = 3;
                for (i, &w) in widths.iter().enumerate() {
                    if i > 0 {
                        stages.push(Stage::MaxPool);
                    }
                    stages.push(Stage::Conv(c.conv(ConvSpec::new(c_in, w, 3, 1, Act::Relu))?));
                    c_in = w;
                }
                stages.push(Stage::GlobalPool);
            }
            Architecture::Mlp { widths } => {
                stages.push(Stage::Flatten);
                let mut n_in = 3 * (spec.input_resolution as usize).pow(2);
                for (i, &w) in widths.iter().enumerate() {
                    let act = if i + 1 == widths.len() { Act::Identity } else { Act::Tanh };
                    stages.push(Stage::Dense(c.dense(n_in, w, act)?));
                    n_in = w;
                }
            }
        }
        let layers = c.next;
        Ok(Self { stages, layers })
    }

    /// Number of parameterised layers.
    pub fn layer_count(&self) -> usize {
        self.layers
    }

    /// NCHW batch to (N, embedding_dim).
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut x = x.clone();
        for stage in &self.stages {
            x = match stage {
                Stage::Conv(conv) => conv.forward(&x, mode)?,
                Stage::MaxPool => x.max_pool2d(2)?,
                Stage::Bottleneck { convs, shortcut } => {
                    let mut y = x.clone();
                    for conv in convs {
                        y = conv.forward(&y, mode)?;
                    }
                    let skip = match shortcut {
                        Some(s) => s.forward(&x, mode)?,
                        None => x,
                    };
                    (y + skip)?.relu()?
                }
                Stage::Inverted { expand, depthwise, project, residual } => {
                    let mut y = match expand {
                        Some(e) => e.forward(&x, mode)?,
                        None => x.clone(),
                    };
                    y = depthwise.forward(&y, mode)?;
                    y = project.forward(&y, mode)?;
                    if *residual {
                        (y + x)?
                    } else {
                        y
                    }
                }
                Stage::GlobalPool => global_avg_pool(&x)?,
                Stage::Flatten => x.flatten_from(1)?,
                Stage::Dense(l) => l.forward(&x, mode)?,
            };
        }
        Ok(x)
    }
}
