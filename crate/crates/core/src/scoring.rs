//! The narrow interface between sampling/evaluation and whatever produces
//! similarity scores.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Where in the verifier a similarity is read off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    /// Sigmoid of the final linear output.
    Final,
    /// 1/(1+d) over the 512-unit head activations of the two branches.
    Fc512,
    /// 1/(1+d) over the backbone embeddings.
    Bottleneck,
}

impl Tap {
    pub const ALL: [Tap; 3] = [Tap::Final, Tap::Fc512, Tap::Bottleneck];

    pub fn as_str(self) -> &'static str {
        match self {
            Tap::Final => "final",
            Tap::Fc512 => "fc512",
            Tap::Bottleneck => "bottleneck",
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tap {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "final" | "final_output" => Ok(Tap::Final),
            "fc512" => Ok(Tap::Fc512),
            "bottleneck" | "bottleneck2048" => Ok(Tap::Bottleneck),
            other => Err(format!("unknown tap {other:?} (expected final, fc512 or bottleneck)")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("image {image_id:?} is not available")]
    MissingImage { image_id: String },
    #[error("scoring backend failed: {0}")]
    Backend(String),
}

/// Anything that maps (reference image id, probe image id) pairs to
/// similarities in [0, 1].
pub trait PairScorer: Send + Sync {
    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, ScoreError>;

    fn score(&self, reference: &str, probe: &str) -> Result<f64, ScoreError> {
        let s = self.score_pairs(&[(reference, probe)])?;
        s.into_iter().next().ok_or_else(|| ScoreError::Backend("scorer returned no score".into()))
    }
}

impl<T: PairScorer + ?Sized> PairScorer for &T {
    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, ScoreError> {
        (**self).score_pairs(pairs)
    }
}

impl<T: PairScorer + ?Sized> PairScorer for Box<T> {
    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, ScoreError> {
        (**self).score_pairs(pairs)
    }
}

/// Averages member similarities pair by pair.
pub struct MeanEnsemble<S> {
    members: Vec<S>,
}

impl<S: PairScorer> MeanEnsemble<S> {
    /// `None` for an empty member list.
    pub fn new(members: Vec<S>) -> Option<Self> {
        (!members.is_empty()).then_some(Self { members })
    }

    pub fn members(&self) -> &[S] {
        &self.members
    }
}

impl<S: PairScorer> PairScorer for MeanEnsemble<S> {
    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, ScoreError> {
        if self.members.len() == 1 {
            return self.members[0].score_pairs(pairs);
        }
        let mut sum = vec![0.0; pairs.len()];
        for m in &self.members {
            let scores = m.score_pairs(pairs)?;
            if scores.len() != pairs.len() {
                return Err(ScoreError::Backend(format!("member returned {} scores for {} pairs", scores.len(), pairs.len())));
            }
            for (acc, s) in sum.iter_mut().zip(scores) {
                *acc += s;
            }
        }
        let n = self.members.len() as f64;
        Ok(sum.into_iter().map(|s| s / n).collect())
    }
}

/// Scorer backed by a closure; handy for stubs and tests.
pub struct FnScorer<F>(pub F);

impl<F> PairScorer for FnScorer<F>
where
    F: Fn(&str, &str) -> f64 + Send + Sync,
{
    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, ScoreError> {
        Ok(pairs.iter().map(|(a, b)| (self.0)(a, b)).collect())
    }
}
