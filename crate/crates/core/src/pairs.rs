//! Verification pairs: training draws over several datasets, online hard
//! imposter mining, and fixed benchmark pair lists.
//!
//! A pair always puts an unmasked image in the reference slot and a masked
//! image in the probe slot. Imposter pairs never cross datasets.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{DatasetIndex, Role, Splits, Variant};
use crate::rng::{derive_seed, seeded, Rng};
use crate::scoring::{PairScorer, ScoreError};

pub const PAIR_LIST_HEADER: [&str; 4] = ["reference_image_id", "probe_image_id", "label", "dataset_id"];

/// Label counts are only enumerated exhaustively below this universe size.
const ENUMERATION_LIMIT: u128 = 1 << 20;

#[derive(Debug, Error)]
pub enum PairError {
    #[error("dataset {0:?} has no valid pair of the requested kind")]
    ExhaustedDataset(String),
    #[error("no datasets available for sampling")]
    NoDatasets,
    #[error("pair count {0} must be even")]
    OddPairCount(usize),
    #[error("requested {requested} pairs of one label but only {available} distinct pairs exist")]
    InsufficientPairs { requested: usize, available: u128 },
    #[error("benchmark lists cover one dataset, index holds {0:?}")]
    MultipleDatasets(Vec<String>),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("pair list line {line}: {message}")]
    Format { line: u64, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Score(#[from] ScoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Imposter,
    Authentic,
}

impl Label {
    pub fn as_digit(self) -> u8 {
        match self {
            Label::Authentic => 1,
            Label::Imposter => 0,
        }
    }

    pub fn from_digit(s: &str) -> Option<Label> {
        match s {
            "1" => Some(Label::Authentic),
            "0" => Some(Label::Imposter),
            _ => None,
        }
    }

    pub fn is_authentic(self) -> bool {
        self == Label::Authentic
    }
}

/// One verification trial.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairSpec {
    /// Unmasked reference image id.
    pub reference: String,
    /// Masked probe image id.
    pub probe: String,
    pub label: Label,
    pub dataset_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIdentity {
    pub identity_id: String,
    pub unmasked: Vec<String>,
    pub masked: Vec<String>,
}

/// Sampling universe: per dataset, the identities that have at least one
/// image of each variant. Identities whose masked images were all
/// discarded never enter a pool.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairPool {
    datasets: BTreeMap<String, Vec<PoolIdentity>>,
}

impl PairPool {
    /// Pool over all eligible identities of `index`, optionally restricted
    /// to a set of identity ids.
    pub fn new(index: &DatasetIndex, identities: Option<&BTreeSet<String>>) -> Self {
        let mut grouped: BTreeMap<(String, String), (Vec<String>, Vec<String>)> = BTreeMap::new();
        for r in index.records() {
            if identities.is_some_and(|s| !s.contains(&r.identity_id)) {
                continue;
            }
            let e = grouped.entry((r.dataset_id.clone(), r.identity_id.clone())).or_default();
            match r.variant {
                Variant::Unmasked => e.0.push(r.image_id.clone()),
                Variant::Masked => e.1.push(r.image_id.clone()),
            }
        }
        let mut datasets: BTreeMap<String, Vec<PoolIdentity>> = BTreeMap::new();
        for ((ds, id), (unmasked, masked)) in grouped {
            if unmasked.is_empty() || masked.is_empty() {
                continue;
            }
            datasets.entry(ds).or_default().push(PoolIdentity { identity_id: id, unmasked, masked });
        }
        Self { datasets }
    }

    /// Union of several pools; identities of a dataset present in more than
    /// one input are concatenated in input order.
    pub fn merged(pools: impl IntoIterator<Item = PairPool>) -> Self {
        let mut datasets: BTreeMap<String, Vec<PoolIdentity>> = BTreeMap::new();
        for pool in pools {
            for (ds, ids) in pool.datasets {
                datasets.entry(ds).or_default().extend(ids);
            }
        }
        Self { datasets }
    }

    /// Pool over the identities of one split role.
    pub fn for_role(index: &DatasetIndex, splits: &Splits, role: Role) -> Self {
        Self::new(index, Some(splits.role(role)))
    }

    pub fn dataset_ids(&self) -> Vec<&str> {
        self.datasets.keys().map(String::as_str).collect()
    }

    pub fn identities(&self, dataset_id: &str) -> &[PoolIdentity] {
        self.datasets.get(dataset_id).map_or(&[], Vec::as_slice)
    }

    pub fn identity(&self, dataset_id: &str, identity_id: &str) -> Option<&PoolIdentity> {
        self.identities(dataset_id).iter().find(|i| i.identity_id == identity_id)
    }

    /// Images (both variants) of eligible identities in a dataset.
    pub fn image_count(&self, dataset_id: &str) -> usize {
        self.identities(dataset_id).iter().map(|i| i.unmasked.len() + i.masked.len()).sum()
    }

    pub fn identity_count(&self) -> usize {
        self.datasets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrawMode {
    /// Datasets drawn with probability proportional to their size.
    Uniform,
    /// Every dataset equally likely.
    Stratified,
}

impl fmt::Display for DrawMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DrawMode::Uniform => "uniform",
            DrawMode::Stratified => "stratified",
        })
    }
}

/// Categorical distribution over datasets.
#[derive(Debug, Clone)]
pub struct DrawStrategy {
    pub mode: DrawMode,
    weights: Vec<(String, f64)>,
    dist: WeightedIndex<f64>,
}

impl DrawStrategy {
    /// Builds the strategy from dataset sizes.
    pub fn from_sizes(mode: DrawMode, sizes: &[(String, usize)]) -> Result<Self, PairError> {
        let sizes: Vec<_> = sizes.iter().filter(|(_, n)| *n > 0).collect();
        if sizes.is_empty() {
            return Err(PairError::NoDatasets);
        }
        let total: usize = sizes.iter().map(|(_, n)| n).sum();
        let weights: Vec<(String, f64)> = sizes
            .iter()
            .map(|(id, n)| {
                let w = match mode {
                    DrawMode::Uniform => *n as f64 / total as f64,
                    DrawMode::Stratified => 1.0 / sizes.len() as f64,
                };
                (id.clone(), w)
            })
            .collect();
        let dist = WeightedIndex::new(weights.iter().map(|(_, w)| *w))
            .map_err(|e| PairError::InvalidParameter(e.to_string()))?;
        Ok(Self { mode, weights, dist })
    }

    /// Sizes are image counts of the pool's eligible identities.
    pub fn for_pool(mode: DrawMode, pool: &PairPool) -> Result<Self, PairError> {
        let sizes: Vec<_> = pool.dataset_ids().into_iter().map(|d| (d.to_string(), pool.image_count(d))).collect();
        Self::from_sizes(mode, &sizes)
    }

    /// `(dataset_id, probability)` pairs, summing to 1.
    pub fn weights(&self) -> &[(String, f64)] {
        &self.weights
    }
}

/// Draws one dataset id.
pub fn choose_dataset<'a>(strategy: &'a DrawStrategy, rng: &mut impl RngCore) -> &'a str {
    &strategy.weights[strategy.dist.sample(rng)].0
}

fn pick<'a, T>(items: &'a [T], rng: &mut impl RngCore) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

/// A pair of the given label within one dataset, identities and images
/// uniform.
pub fn sample_pair(pool: &PairPool, dataset_id: &str, label: Label, rng: &mut impl RngCore) -> Result<PairSpec, PairError> {
    let ids = pool.identities(dataset_id);
    let exhausted = || PairError::ExhaustedDataset(dataset_id.to_string());
    let (ref_identity, probe_identity) = match label {
        Label::Authentic => {
            let i = ids.first().map(|_| rng.random_range(0..ids.len())).ok_or_else(exhausted)?;
            (i, i)
        }
        Label::Imposter => {
            if ids.len() < 2 {
                return Err(exhausted());
            }
            let a = rng.random_range(0..ids.len());
            let mut b = rng.random_range(0..ids.len() - 1);
            if b >= a {
                b += 1;
            }
            (a, b)
        }
    };
    Ok(PairSpec {
        reference: pick(&ids[ref_identity].unmasked, rng).clone(),
        probe: pick(&ids[probe_identity].masked, rng).clone(),
        label,
        dataset_id: dataset_id.to_string(),
    })
}

/// One training pair: dataset by strategy, label Bernoulli(authentic_probability).
pub fn draw_training_pair(
    pool: &PairPool,
    strategy: &DrawStrategy,
    authentic_probability: f64,
    rng: &mut impl RngCore,
) -> Result<PairSpec, PairError> {
    if !(0.0..=1.0).contains(&authentic_probability) {
        return Err(PairError::InvalidParameter(format!("authentic_probability {authentic_probability} outside [0, 1]")));
    }
    let dataset = choose_dataset(strategy, rng);
    let label = if rng.random_bool(authentic_probability) { Label::Authentic } else { Label::Imposter };
    sample_pair(pool, dataset, label, rng)
}

/// The imposter pair the scorer finds most similar among `candidate_count`
/// candidates.
///
/// A reference image is drawn from `reference_identity`; each candidate is
/// a masked image of a distinct other identity of the same dataset (drawn
/// with replacement once the other identities run out). Ties go to the
/// earliest candidate.
pub fn mine_hard_imposter(
    pool: &PairPool,
    dataset_id: &str,
    reference_identity: &str,
    candidate_count: usize,
    scorer: &dyn PairScorer,
    rng: &mut impl RngCore,
) -> Result<PairSpec, PairError> {
    if candidate_count == 0 {
        return Err(PairError::InvalidParameter("candidate_count must be at least 1".into()));
    }
    let ids = pool.identities(dataset_id);
    let me = ids
        .iter()
        .position(|i| i.identity_id == reference_identity)
        .ok_or_else(|| PairError::ExhaustedDataset(dataset_id.to_string()))?;
    let others: Vec<usize> = (0..ids.len()).filter(|&i| i != me).collect();
    if others.is_empty() {
        return Err(PairError::ExhaustedDataset(dataset_id.to_string()));
    }
    let reference = pick(&ids[me].unmasked, rng).clone();
    let chosen: Vec<usize> = if candidate_count <= others.len() {
        index::sample(rng, others.len(), candidate_count).into_iter().map(|k| others[k]).collect()
    } else {
        (0..candidate_count).map(|_| *pick(&others, rng)).collect()
    };
    let probes: Vec<String> = chosen.iter().map(|&k| pick(&ids[k].masked, rng).clone()).collect();
    let pairs: Vec<(&str, &str)> = probes.iter().map(|p| (reference.as_str(), p.as_str())).collect();
    let scores = scorer.score_pairs(&pairs)?;
    let best = argmax_first(&scores).ok_or_else(|| ScoreError::Backend("no scores returned".into()))?;
    Ok(PairSpec { reference, probe: probes[best].clone(), label: Label::Imposter, dataset_id: dataset_id.to_string() })
}

/// Index of the largest value, earliest on ties. NaN never wins.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some(b) if v <= values[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Stateful training-pair source with its own RNG and a log of the dataset
/// of every emitted pair.
pub struct PairSampler {
    pool: PairPool,
    strategy: DrawStrategy,
    authentic_probability: f64,
    hard_sample_size: Option<usize>,
    rng: Rng,
    log: Vec<String>,
}

impl PairSampler {
    pub fn new(
        pool: PairPool,
        mode: DrawMode,
        authentic_probability: f64,
        hard_sample_size: Option<usize>,
        seed: u64,
    ) -> Result<Self, PairError> {
        let strategy = DrawStrategy::for_pool(mode, &pool)?;
        Ok(Self { pool, strategy, authentic_probability, hard_sample_size, rng: seeded(seed), log: Vec::new() })
    }

    pub fn strategy(&self) -> &DrawStrategy {
        &self.strategy
    }

    pub fn pool(&self) -> &PairPool {
        &self.pool
    }

    pub fn hard_sample_size(&self) -> Option<usize> {
        self.hard_sample_size
    }

    /// Dataset ids of all pairs emitted so far.
    pub fn log(&self) -> &[String] {
        &self.log
    }

    /// Next pair. Imposters are mined with `scorer` when a hard sample size
    /// is configured; mining without a scorer is an error.
    pub fn next_pair(&mut self, scorer: Option<&dyn PairScorer>) -> Result<PairSpec, PairError> {
        let pair = match self.hard_sample_size {
            None => draw_training_pair(&self.pool, &self.strategy, self.authentic_probability, &mut self.rng)?,
            Some(k) => {
                let dataset = choose_dataset(&self.strategy, &mut self.rng).to_string();
                if self.rng.random_bool(self.authentic_probability) {
                    sample_pair(&self.pool, &dataset, Label::Authentic, &mut self.rng)?
                } else {
                    let scorer = scorer.ok_or_else(|| PairError::InvalidParameter("hard mining needs a scorer".into()))?;
                    let ids = self.pool.identities(&dataset);
                    if ids.len() < 2 {
                        return Err(PairError::ExhaustedDataset(dataset));
                    }
                    let reference = pick(ids, &mut self.rng).identity_id.clone();
                    mine_hard_imposter(&self.pool, &dataset, &reference, k, scorer, &mut self.rng)?
                }
            }
        };
        self.log.push(pair.dataset_id.clone());
        Ok(pair)
    }

    pub fn next_batch(&mut self, n: usize, scorer: Option<&dyn PairScorer>) -> Result<Vec<PairSpec>, PairError> {
        (0..n).map(|_| self.next_pair(scorer)).collect()
    }
}

/// A fixed, label-balanced list of evaluation pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkPairList {
    pub pairs: Vec<PairSpec>,
    pub seed: u64,
    pub dataset_id: String,
}

impl BenchmarkPairList {
    pub fn count(&self, label: Label) -> usize {
        self.pairs.iter().filter(|p| p.label == label).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# seed={} dataset={} generator=maskmatch/{}\n{}\n",
            self.seed,
            self.dataset_id,
            env!("CARGO_PKG_VERSION"),
            PAIR_LIST_HEADER.join(",")
        );
        for p in &self.pairs {
            out.push_str(&format!("{},{},{},{}\n", p.reference, p.probe, p.label.as_digit(), p.dataset_id));
        }
        out
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<(), PairError> {
        let path = path.as_ref();
        crate::registry::write_file(path, self.to_text().as_bytes()).map_err(|source| PairError::Io { path: path.to_path_buf(), source })
    }

    pub fn import(path: impl AsRef<Path>) -> Result<Self, PairError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PairError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, PairError> {
        let err = |line: usize, message: String| PairError::Format { line: line as u64, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        let (n, preamble) = lines.next().ok_or_else(|| err(1, "missing preamble".into()))?;
        let fields = preamble
            .strip_prefix('#')
            .ok_or_else(|| err(n, "preamble must start with '#'".into()))?;
        let mut seed = None;
        let mut dataset_id = None;
        for kv in fields.split_whitespace() {
            match kv.split_once('=') {
                Some(("seed", v)) => seed = Some(v.parse::<u64>().map_err(|e| err(n, format!("seed: {e}")))?),
                Some(("dataset", v)) => dataset_id = Some(v.to_string()),
                _ => {}
            }
        }
        let seed = seed.ok_or_else(|| err(n, "preamble lacks seed=".into()))?;
        let dataset_id = dataset_id.ok_or_else(|| err(n, "preamble lacks dataset=".into()))?;
        let (n, header) = lines.next().ok_or_else(|| err(2, "missing header".into()))?;
        if header.split(',').map(str::trim).ne(PAIR_LIST_HEADER) {
            return Err(err(n, format!("header must be {}", PAIR_LIST_HEADER.join(","))));
        }
        let mut pairs = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(err(n, format!("expected 4 fields, got {}", f.len())));
            }
            if f[0].is_empty() || f[1].is_empty() || f[3].is_empty() {
                return Err(err(n, "empty field".into()));
            }
            let label = Label::from_digit(f[2]).ok_or_else(|| err(n, format!("label must be 1 or 0, got {:?}", f[2])))?;
            pairs.push(PairSpec { reference: f[0].into(), probe: f[1].into(), label, dataset_id: f[3].into() });
        }
        Ok(Self { pairs, seed, dataset_id })
    }

    /// Checks every pair against the index plus list-level balance and
    /// distinctness. Line numbers refer to the exported file.
    pub fn validate(&self, index: &DatasetIndex) -> Result<(), PairError> {
        let line_of = |i: usize| i as u64 + 3;
        let mut seen = HashSet::new();
        for (i, p) in self.pairs.iter().enumerate() {
            let bad = |message: String| PairError::Format { line: line_of(i), message };
            let r = index.record(&p.reference).ok_or_else(|| bad(format!("unknown reference {:?}", p.reference)))?;
            let q = index.record(&p.probe).ok_or_else(|| bad(format!("unknown probe {:?}", p.probe)))?;
            if r.variant != Variant::Unmasked {
                return Err(bad(format!("reference {:?} is not unmasked", p.reference)));
            }
            if q.variant != Variant::Masked {
                return Err(bad(format!("probe {:?} is not masked", p.probe)));
            }
            if r.dataset_id != p.dataset_id || q.dataset_id != p.dataset_id {
                return Err(bad("pair crosses datasets".into()));
            }
            match p.label {
                Label::Authentic if r.identity_id != q.identity_id => {
                    return Err(bad("authentic pair with different identities".into()))
                }
                Label::Imposter if r.identity_id == q.identity_id => {
                    return Err(bad(format!("imposter pair shares identity {:?}", r.identity_id)))
                }
                _ => {}
            }
            if !seen.insert((p.reference.as_str(), p.probe.as_str())) {
                return Err(bad("duplicate (reference, probe) tuple".into()));
            }
        }
        let (a, b) = (self.count(Label::Authentic), self.count(Label::Imposter));
        if a != b {
            return Err(PairError::Format {
                line: line_of(self.pairs.len()),
                message: format!("unbalanced list: {a} authentic vs {b} imposter"),
            });
        }
        Ok(())
    }
}

/// Number of distinct (reference, probe) tuples per label in one dataset.
pub fn pair_universe(pool: &PairPool, dataset_id: &str) -> (u128, u128) {
    let ids = pool.identities(dataset_id);
    let masked_total: u128 = ids.iter().map(|i| i.masked.len() as u128).sum();
    let mut authentic = 0u128;
    let mut imposter = 0u128;
    for i in ids {
        let u = i.unmasked.len() as u128;
        let m = i.masked.len() as u128;
        authentic += u * m;
        imposter += u * (masked_total - m);
    }
    (authentic, imposter)
}

fn enumerate(ids: &[PoolIdentity], label: Label) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for (a, ia) in ids.iter().enumerate() {
        for ru in 0..ia.unmasked.len() {
            for (b, ib) in ids.iter().enumerate() {
                if (label == Label::Authentic) != (a == b) {
                    continue;
                }
                for pm in 0..ib.masked.len() {
                    out.push((a, ru, b, pm));
                }
            }
        }
    }
    out
}

fn draw_distinct(
    ids: &[PoolIdentity],
    dataset_id: &str,
    label: Label,
    universe: u128,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<PairSpec>, PairError> {
    let make = |(a, ru, b, pm): (usize, usize, usize, usize)| PairSpec {
        reference: ids[a].unmasked[ru].clone(),
        probe: ids[b].masked[pm].clone(),
        label,
        dataset_id: dataset_id.to_string(),
    };
    if universe <= ENUMERATION_LIMIT || universe < 4 * count as u128 {
        let all = enumerate(ids, label);
        return Ok(index::sample(rng, all.len(), count).into_iter().map(|k| make(all[k])).collect());
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut pool = PairPool::default();
    pool.datasets.insert(dataset_id.to_string(), ids.to_vec());
    while out.len() < count {
        let p = sample_pair(&pool, dataset_id, label, rng)?;
        if seen.insert((p.reference.clone(), p.probe.clone())) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Generates `pair_count` distinct pairs, half authentic and half imposter,
/// from a single-dataset index; deterministic in `seed`.
pub fn generate_benchmark_pairs(index: &DatasetIndex, pair_count: usize, seed: u64) -> Result<BenchmarkPairList, PairError> {
    if pair_count % 2 != 0 {
        return Err(PairError::OddPairCount(pair_count));
    }
    let pool = PairPool::new(index, None);
    let ids = pool.dataset_ids();
    let dataset_id = match ids.as_slice() {
        [] => index.dataset_id().to_string(),
        [one] => one.to_string(),
        many => return Err(PairError::MultipleDatasets(many.iter().map(|s| s.to_string()).collect())),
    };
    let half = pair_count / 2;
    let (auth_universe, imp_universe) = pair_universe(&pool, &dataset_id);
    for available in [auth_universe, imp_universe] {
        if (half as u128) > available {
            return Err(PairError::InsufficientPairs { requested: half, available });
        }
    }
    let mut rng = seeded(derive_seed(seed, "benchmark_pairs"));
    let identities = pool.identities(&dataset_id);
    let mut pairs = draw_distinct(identities, &dataset_id, Label::Authentic, auth_universe, half, &mut rng)?;
    pairs.extend(draw_distinct(identities, &dataset_id, Label::Imposter, imp_universe, half, &mut rng)?);
    pairs.shuffle(&mut rng);
    Ok(BenchmarkPairList { pairs, seed, dataset_id })
}
