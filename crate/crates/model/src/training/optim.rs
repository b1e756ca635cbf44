use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::params::Param;

/// Stochastic gradient descent, optionally with heavy-ball momentum and L2
/// weight decay.
#[derive(Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn plain(learning_rate: f64) -> Self {
        Self::with_momentum(learning_rate, 0.0, 0.0)
    }

    pub fn with_momentum(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { learning_rate, momentum, weight_decay, velocity: HashMap::new() }
    }

    /// Updates every parameter in `params` that has a gradient.
    pub fn step(&mut self, params: &[&Param], grads: &GradStore) -> Result<()> {
        for p in params {
            let w = p.var.as_tensor();
            let Some(g) = grads.get(w) else { continue };
            let mut g = g.clone();
            if self.weight_decay != 0.0 {
                g = (g + (w * self.weight_decay)?)?;
            }
            if self.momentum != 0.0 {
                g = match self.velocity.get(&p.name) {
                    Some(v) => ((v * self.momentum)? + g)?,
                    None => g,
                };
                self.velocity.insert(p.name.clone(), g.clone());
            }
            p.var.set(&(w - (g * self.learning_rate)?)?)?;
        }
        Ok(())
    }
}

/// Mean binary cross-entropy between `sigmoid(logits)` and 0/1 labels,
/// in the overflow-free form max(z, 0) - z y + ln(1 + e^-|z|).
pub fn bce_with_logits(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let loss = ((logits.relu()? - (logits * labels)?)? + softplus)?;
    Ok(loss.mean_all()?)
}
