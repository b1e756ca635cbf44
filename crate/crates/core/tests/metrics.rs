use std::sync::Mutex;

use maskmatch_core::metrics::*;
use maskmatch_core::pairs::{BenchmarkPairList, Label, PairPool, PairSpec};
use maskmatch_core::registry::{DatasetIndex, ImageRecord, Variant};
use maskmatch_core::report::*;
use maskmatch_core::rng::{seeded, Rng};
use maskmatch_core::scoring::{FnScorer, PairScorer, ScoreError};
use proptest::prelude::*;
use rand::Rng as _;

/// Brute-force sweep: thresholds are every distinct score, each counted by
/// a full pass over both partitions.
fn oracle_points(a: &[f64], i: &[f64]) -> Vec<(f64, f64, f64)> {
    let mut t: Vec<f64> = a.iter().chain(i).copied().collect();
    t.sort_by(|x, y| x.partial_cmp(y).unwrap());
    t.dedup();
    t.iter()
        .map(|&th| {
            let far = i.iter().filter(|&&s| s >= th).count() as f64 / i.len() as f64;
            let frr = a.iter().filter(|&&s| s < th).count() as f64 / a.len() as f64;
            (th, far, frr)
        })
        .collect()
}

fn oracle_full(a: &[f64], i: &[f64]) -> Vec<(f64, f64)> {
    let mut v = vec![(1.0, 0.0)];
    v.extend(oracle_points(a, i).into_iter().map(|(_, far, frr)| (far, frr)));
    v.push((0.0, 1.0));
    v
}

fn oracle_eer(a: &[f64], i: &[f64]) -> f64 {
    let pts = oracle_full(a, i);
    for k in 0..pts.len() {
        let (far, frr) = pts[k];
        if far - frr <= 0.0 {
            if k == 0 || far == frr {
                return (far + frr) / 2.0;
            }
            let (pf, pr) = pts[k - 1];
            let (d0, d1) = (pf - pr, far - frr);
            return pf + d0 / (d0 - d1) * (far - pf);
        }
    }
    unreachable!("the all-reject sentinel always has FAR < FRR")
}

fn oracle_frr100(a: &[f64], i: &[f64]) -> f64 {
    oracle_full(a, i).into_iter().filter(|(far, _)| *far < 0.01).map(|(_, frr)| frr).fold(1.0, f64::min)
}

fn mann_whitney(a: &[f64], i: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &x in a {
        for &y in i {
            wins += if x > y {
                1.0
            } else if x == y {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (a.len() * i.len()) as f64
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    // Coarse grids make ties common, fine ones make them rare.
    prop_oneof![
        prop::collection::vec((0u32..=20).prop_map(|k| f64::from(k) / 20.0), 1..120),
        prop::collection::vec(0.0f64..=1.0, 1..120),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn metrics_match_the_brute_force_sweep(a in scores(), i in scores()) {
        let set = ScoreSet::new(a.clone(), i.clone());
        let curve = far_frr_curve(&set).unwrap();
        let inner: Vec<_> = curve[1..curve.len() - 1].iter().map(|p| (p.threshold, p.far, p.frr)).collect();
        prop_assert_eq!(inner.len(), oracle_points(&a, &i).len());
        for (got, want) in inner.iter().zip(oracle_points(&a, &i)) {
            prop_assert!((got.1 - want.1).abs() < 1e-9 && (got.2 - want.2).abs() < 1e-9 && got.0 == want.0);
        }
        let (first, last) = (curve[0], curve[curve.len() - 1]);
        prop_assert_eq!((first.far, first.frr), (1.0, 0.0));
        prop_assert_eq!((last.far, last.frr), (0.0, 1.0));
        for w in curve.windows(2) {
            prop_assert!(w[0].threshold < w[1].threshold);
            prop_assert!(w[1].far <= w[0].far && w[1].frr >= w[0].frr);
        }
        prop_assert!((eer(&set).unwrap() - oracle_eer(&a, &i)).abs() < 1e-9);
        prop_assert!((frr100(&set).unwrap() - oracle_frr100(&a, &i)).abs() < 1e-9);
        prop_assert!((roc_auc(&set).unwrap() - mann_whitney(&a, &i)).abs() < 1e-9);
        let e = eer(&set).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn auc_and_rank_eer_ignore_monotone_transforms(a in scores(), i in scores()) {
        let f = |v: &[f64]| v.iter().map(|s| (3.0 * s).exp() - 7.0).collect::<Vec<_>>();
        let x = ScoreSet::new(a.clone(), i.clone());
        let y = ScoreSet::new(f(&a), f(&i));
        prop_assert_eq!(roc_auc(&x).unwrap(), roc_auc(&y).unwrap());
        let bx = eer_from_curve(&far_frr_curve(&x).unwrap());
        let by = eer_from_curve(&far_frr_curve(&y).unwrap());
        prop_assert_eq!((bx.lower.far, bx.lower.frr, bx.upper.far, bx.upper.frr), (by.lower.far, by.lower.frr, by.upper.far, by.upper.frr));
    }
}

#[test]
fn hand_fixtures() {
    let s = ScoreSet::new(vec![0.9, 0.8, 0.7, 0.4], vec![0.6, 0.5, 0.3, 0.2]);
    assert!((eer(&s).unwrap() - 0.25).abs() < 1e-12);
    let sep = ScoreSet::new(vec![0.9, 0.8, 0.95], vec![0.1, 0.2, 0.3]);
    assert_eq!(eer(&sep).unwrap(), 0.0);
    assert_eq!(frr100(&sep).unwrap(), 0.0);
    assert_eq!(roc_auc(&sep).unwrap(), 1.0);
    let c = far_frr_curve(&ScoreSet::new(vec![0.9], vec![0.1])).unwrap();
    // Rates only change at score values, so t behaves like the next grid point up.
    let at = |t: f64| c.iter().find(|p| p.threshold >= t).copied().unwrap();
    assert_eq!((at(0.5).far, at(0.5).frr), (0.0, 0.0));
}

#[test]
fn indistinguishable_classes_sit_at_chance() {
    let mut r = seeded(2024);
    let draw = |r: &mut Rng| (0..10_000).map(|_| r.random::<f64>()).collect::<Vec<_>>();
    let s = ScoreSet::new(draw(&mut r), draw(&mut r));
    assert!((eer(&s).unwrap() - 0.5).abs() <= 0.02);
    assert!((roc_auc(&s).unwrap() - 0.5).abs() <= 0.02);
}

fn validation_pool(identities: usize) -> PairPool {
    let mut records = Vec::new();
    for i in 0..identities {
        for j in 0..2 {
            for (variant, tag) in [(Variant::Unmasked, "u"), (Variant::Masked, "m")] {
                records.push(ImageRecord {
                    image_id: format!("p{i}_{tag}{j}"),
                    identity_id: format!("p{i}"),
                    dataset_id: "val".into(),
                    variant,
                    path: "x.png".into(),
                });
            }
        }
    }
    PairPool::new(&DatasetIndex::new("val", "", records).unwrap(), None)
}

fn identity_of(image: &str) -> &str {
    image.split('_').next().unwrap()
}

#[test]
fn precision_protocol_stubs() {
    let pool = validation_pool(30);
    let oracle = FnScorer(|a: &str, b: &str| if identity_of(a) == identity_of(b) { 1.0 } else { 0.0 });
    let r = validation_precision(&oracle, &pool, 400, 19, &mut seeded(1)).unwrap();
    assert_eq!((r.precision, r.successes, r.steps, r.imposters_per_step), (1.0, 400, 400, 19));
    let constant = FnScorer(|_: &str, _: &str| 0.7);
    assert_eq!(validation_precision(&constant, &pool, 400, 19, &mut seeded(1)).unwrap().precision, 0.0);

    let rng = Mutex::new(seeded(77));
    let random = FnScorer(|_: &str, _: &str| rng.lock().unwrap().random::<f64>());
    let r = validation_precision(&random, &pool, 400, 19, &mut seeded(3)).unwrap();
    assert!((0.015..=0.085).contains(&r.precision), "{}", r.precision);
    assert_eq!(r.precision, r.successes as f64 / r.steps as f64);
}

#[test]
fn precision_is_reproducible_and_rank_invariant() {
    let pool = validation_pool(12);
    let noisy = |a: &str, b: &str| -> f64 {
        let h = maskmatch_core::rng::derive_seed(0, &format!("{a}|{b}"));
        (h % 10_000) as f64 / 10_000.0 + if identity_of(a) == identity_of(b) { 0.3 } else { 0.0 }
    };
    let base = FnScorer(noisy);
    let squashed = FnScorer(move |a: &str, b: &str| (noisy(a, b) * 5.0).tanh());
    let x = validation_precision(&base, &pool, 200, 19, &mut seeded(9)).unwrap();
    let y = validation_precision(&base, &pool, 200, 19, &mut seeded(9)).unwrap();
    let z = validation_precision(&squashed, &pool, 200, 19, &mut seeded(9)).unwrap();
    assert_eq!(x, y);
    assert_eq!(x, z);
}

#[test]
fn precision_needs_two_identities() {
    let pool = validation_pool(1);
    let s = FnScorer(|_: &str, _: &str| 0.5);
    assert!(matches!(
        validation_precision(&s, &pool, 10, 19, &mut seeded(0)),
        Err(MetricError::InsufficientIdentities { .. })
    ));
}

struct Missing;

impl PairScorer for Missing {
    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, ScoreError> {
        match pairs.iter().find(|(_, b)| *b == "ghost") {
            Some(_) => Err(ScoreError::MissingImage { image_id: "ghost".into() }),
            None => Ok(vec![0.5; pairs.len()]),
        }
    }
}

#[test]
fn scoring_a_pair_list() {
    let empty = BenchmarkPairList { pairs: vec![], seed: 0, dataset_id: "x".into() };
    let s = score_pairs(&Missing, &empty, Provenance::default()).unwrap();
    assert!(s.authentic.is_empty() && s.imposter.is_empty());
    assert_eq!(eer(&s), Err(MetricError::EmptyPartition));

    let pair = |r: &str, p: &str, label| PairSpec { reference: r.into(), probe: p.into(), label, dataset_id: "x".into() };
    let list = BenchmarkPairList {
        pairs: vec![pair("a", "b", Label::Authentic), pair("c", "d", Label::Imposter), pair("e", "ghost", Label::Imposter)],
        seed: 0,
        dataset_id: "x".into(),
    };
    assert_eq!(
        score_pairs(&Missing, &list, Provenance::default()),
        Err(MetricError::MissingImage { pair_index: 2, image_id: "ghost".into() })
    );
    let by_name = FnScorer(|a: &str, _: &str| f64::from(a.as_bytes()[0] - b'a') / 10.0);
    let mut list = list;
    list.pairs.pop();
    list.pairs.push(pair("e", "f", Label::Authentic));
    let s = score_pairs(&by_name, &list, Provenance::default()).unwrap();
    assert_eq!(s.authentic, vec![0.0, 0.4]);
    assert_eq!(s.imposter, vec![0.2]);
    assert_eq!(s, score_pairs(&by_name, &list, Provenance::default()).unwrap());
}

#[test]
fn report_files_round_trip() {
    let mut set = ScoreSet::new(vec![0.9, 0.8, 0.75], vec![0.1, 0.3, 0.2, 0.4]);
    set.provenance = Provenance { model_id: "ft1".into(), tap: "bottleneck".into(), pair_list_id: "fei".into() };
    let report = MetricReport::from_scores(&set).unwrap();
    assert_eq!(report.eer, 0.0);
    assert!(report.curve.iter().all(|p| p.far == 0.0 || p.frr == 0.0), "FAR and FRR supports overlap");
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&report, "fei", 7, dir.path()).unwrap();
    let back = read_metrics(&files.metrics).unwrap();
    assert_eq!(back, vec![MetricsRecord::new(&report, "fei", 7)]);
    assert_eq!(back[0].eer, report.eer);
    assert_eq!(back[0].auc, report.auc);
    for plot in [&files.far_frr_plot, &files.roc_plot] {
        let img = image::open(plot).unwrap();
        assert_eq!((img.width(), img.height()), PLOT_SIZE);
        assert!(plot.file_name().unwrap().to_string_lossy().starts_with("fei__ft1__bottleneck"));
    }
}

#[test]
fn awkward_floats_survive_the_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    let rec = MetricsRecord {
        dataset_id: "d".into(),
        model_id: "m".into(),
        tap: "fc512".into(),
        eer: 0.1 + 0.2,
        frr100: 0.976048,
        auc: 1.0 / 3.0,
        n_authentic: 3,
        n_imposter: 4,
        seed: u64::MAX,
    };
    write_metrics(std::slice::from_ref(&rec), dir.path().join("m.jsonl")).unwrap();
    assert_eq!(read_metrics(dir.path().join("m.jsonl")).unwrap(), vec![rec]);
}
