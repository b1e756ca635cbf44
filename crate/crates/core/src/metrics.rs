//! Threshold-sweep biometric metrics and the 1-vs-N validation precision
//! protocol.
//!
//! A pair is accepted when its similarity is at least the threshold, so
//! FAR(t) counts imposter scores `>= t` and FRR(t) counts authentic scores
//! `< t`.

use rand::seq::IndexedRandom;
use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pairs::{BenchmarkPairList, Label, PairPool, PoolIdentity};
use crate::scoring::{PairScorer, ScoreError};

/// Feasibility bound for FRR100: FAR must stay strictly below this.
pub const FRR100_FAR_LIMIT: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("score set has an empty authentic or imposter partition")]
    EmptyPartition,
    #[error("score set contains a non-finite value")]
    NonFinite,
    #[error("validation needs a dataset with at least 2 identities, found {available}")]
    InsufficientIdentities { available: usize },
    #[error("pair {pair_index}: image {image_id:?} is not available")]
    MissingImage { pair_index: usize, image_id: String },
    #[error(transparent)]
    Score(ScoreError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub tap: String,
    pub pair_list_id: String,
}

/// Similarities partitioned by ground-truth label.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub authentic: Vec<f64>,
    pub imposter: Vec<f64>,
    pub provenance: Provenance,
}

impl ScoreSet {
    pub fn new(authentic: Vec<f64>, imposter: Vec<f64>) -> Self {
        Self { authentic, imposter, provenance: Provenance::default() }
    }

    fn check(&self) -> Result<(), MetricError> {
        if self.authentic.is_empty() || self.imposter.is_empty() {
            return Err(MetricError::EmptyPartition);
        }
        if self.authentic.iter().chain(&self.imposter).any(|s| !s.is_finite()) {
            return Err(MetricError::NonFinite);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// FAR/FRR at every distinct score plus one sentinel below the minimum and
/// one above the maximum, thresholds ascending.
pub fn far_frr_curve(scores: &ScoreSet) -> Result<Vec<CurvePoint>, MetricError> {
    scores.check()?;
    let auth = sorted(&scores.authentic);
    let imp = sorted(&scores.imposter);
    let (n_a, n_i) = (auth.len() as f64, imp.len() as f64);
    let mut thresholds: Vec<f64> = auth.iter().chain(&imp).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let lo = thresholds[0];
    let hi = thresholds[thresholds.len() - 1];
    let margin = |v: f64| 1e-3_f64.max(v.abs() * 1e-9);
    let mut grid = Vec::with_capacity(thresholds.len() + 2);
    grid.push(lo - margin(lo));
    grid.extend(thresholds);
    grid.push(hi + margin(hi));
    Ok(grid
        .into_iter()
        .map(|t| {
            let imp_below = imp.partition_point(|&s| s < t);
            let auth_below = auth.partition_point(|&s| s < t);
            CurvePoint { threshold: t, far: (imp.len() - imp_below) as f64 / n_i, frr: auth_below as f64 / n_a }
        })
        .collect())
}

/// EER with the two curve points bracketing the FAR/FRR crossing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    pub lower: CurvePoint,
    pub upper: CurvePoint,
}

/// Locates the first curve point where FAR - FRR is no longer positive and
/// interpolates linearly from its predecessor.
pub fn eer_from_curve(curve: &[CurvePoint]) -> EerResult {
    let d = |p: &CurvePoint| p.far - p.frr;
    let i = curve.iter().position(|p| d(p) <= 0.0).unwrap_or(curve.len() - 1);
    let upper = curve[i];
    if i == 0 || d(&upper) == 0.0 {
        let eer = (upper.far + upper.frr) / 2.0;
        return EerResult { eer, lower: upper, upper };
    }
    let lower = curve[i - 1];
    let alpha = d(&lower) / (d(&lower) - d(&upper));
    let eer = lower.far + alpha * (upper.far - lower.far);
    EerResult { eer, lower, upper }
}

pub fn eer(scores: &ScoreSet) -> Result<f64, MetricError> {
    Ok(eer_from_curve(&far_frr_curve(scores)?).eer)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frr100 {
    pub frr: f64,
    pub threshold: f64,
    /// False when no threshold short of rejecting every authentic pair keeps
    /// FAR below 1%.
    pub feasible: bool,
}

pub fn frr100_from_curve(curve: &[CurvePoint]) -> Frr100 {
    let mut best = curve[curve.len() - 1];
    for p in curve {
        if p.far < FRR100_FAR_LIMIT && p.frr < best.frr {
            best = *p;
        }
    }
    Frr100 { frr: best.frr, threshold: best.threshold, feasible: best.frr < 1.0 }
}

/// Lowest FRR while FAR < 1%; 1.0 when nothing short of rejecting every
/// pair meets the FAR bound.
pub fn frr100(scores: &ScoreSet) -> Result<f64, MetricError> {
    Ok(frr100_from_curve(&far_frr_curve(scores)?).frr)
}

/// Trapezoidal area under the (FAR, 1 - FRR) polyline.
pub fn auc_from_curve(curve: &[CurvePoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[0].far - w[1].far) * ((1.0 - w[0].frr) + (1.0 - w[1].frr)) / 2.0)
        .sum()
}

pub fn roc_auc(scores: &ScoreSet) -> Result<f64, MetricError> {
    Ok(auc_from_curve(&far_frr_curve(scores)?))
}

/// Scores every pair of a list, partitioned by label with list order kept
/// inside each partition.
pub fn score_pairs(scorer: &dyn PairScorer, list: &BenchmarkPairList, provenance: Provenance) -> Result<ScoreSet, MetricError> {
    let pairs: Vec<(&str, &str)> = list.pairs.iter().map(|p| (p.reference.as_str(), p.probe.as_str())).collect();
    let scores = scorer.score_pairs(&pairs).map_err(|e| match e {
        ScoreError::MissingImage { image_id } => {
            let pair_index = pairs.iter().position(|(a, b)| *a == image_id || *b == image_id).unwrap_or(0);
            MetricError::MissingImage { pair_index, image_id }
        }
        other => MetricError::Score(other),
    })?;
    let mut set = ScoreSet { provenance, ..ScoreSet::default() };
    for (p, s) in list.pairs.iter().zip(scores) {
        match p.label {
            Label::Authentic => set.authentic.push(s),
            Label::Imposter => set.imposter.push(s),
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionResult {
    pub precision: f64,
    pub successes: usize,
    pub steps: usize,
    pub imposters_per_step: usize,
}

pub const DEFAULT_VALIDATION_STEPS: usize = 400;
pub const DEFAULT_IMPOSTERS_PER_STEP: usize = 19;

/// Share of steps in which the authentic pair is the strict maximum among
/// one authentic and `imposters_per_step` imposter pairs.
///
/// Each step draws a reference identity uniformly from all identities that
/// have at least one same-dataset rival, an unmasked reference image and a
/// masked authentic probe, then imposter identities uniformly with
/// replacement from the rest of that dataset, one masked image each.
pub fn validation_precision(
    scorer: &dyn PairScorer,
    pool: &PairPool,
    steps: usize,
    imposters_per_step: usize,
    rng: &mut impl RngCore,
) -> Result<PrecisionResult, MetricError> {
    let candidates: Vec<(&[PoolIdentity], usize)> = pool
        .dataset_ids()
        .into_iter()
        .map(|d| pool.identities(d))
        .filter(|ids| ids.len() >= 2)
        .flat_map(|ids| (0..ids.len()).map(move |i| (ids, i)))
        .collect();
    if candidates.is_empty() {
        return Err(MetricError::InsufficientIdentities { available: pool.identity_count() });
    }
    let mut successes = 0;
    for _ in 0..steps {
        let &(ids, me) = candidates.choose(rng).expect("non-empty");
        let reference = ids[me].unmasked.choose(rng).expect("pool identities have both variants");
        let mut probes = Vec::with_capacity(imposters_per_step + 1);
        probes.push(ids[me].masked.choose(rng).expect("pool identities have both variants"));
        for _ in 0..imposters_per_step {
            let mut k = rng.random_range(0..ids.len() - 1);
            if k >= me {
                k += 1;
            }
            probes.push(ids[k].masked.choose(rng).expect("pool identities have both variants"));
        }
        let pairs: Vec<(&str, &str)> = probes.iter().map(|p| (reference.as_str(), p.as_str())).collect();
        let scores = scorer.score_pairs(&pairs).map_err(MetricError::Score)?;
        if scores[1..].iter().all(|&s| scores[0] > s) {
            successes += 1;
        }
    }
    let precision = if steps == 0 { 0.0 } else { successes as f64 / steps as f64 };
    Ok(PrecisionResult { precision, successes, steps, imposters_per_step })
}
