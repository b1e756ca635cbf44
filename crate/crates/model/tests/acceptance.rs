//! Acceptance run: one PASS/FAIL line per criterion. `ACCEPTANCE_ONLY=1,8`
//! restricts the run to the listed criteria.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::Instant;

use candle_core::{DType, Tensor};
use image::{Rgb, RgbImage};
use maskmatch_core::geometry::{mask_dataset, mask_image, verify_maskability, MaskConfig, MaskingTools, Point};
use maskmatch_core::metrics::{eer, far_frr_curve, frr100, roc_auc, score_pairs, validation_precision, Provenance, ScoreSet};
use maskmatch_core::pairs::{choose_dataset, generate_benchmark_pairs, mine_hard_imposter, DrawMode, DrawStrategy, Label, PairPool, PairSampler};
use maskmatch_core::registry::{split_identities, DatasetIndex, ImageRecord, Role, Variant};
use maskmatch_core::rng::seeded;
use maskmatch_core::scoring::{FnScorer, MeanEnsemble, PairScorer, Tap};
use maskmatch_core::synth::{smoke_corpus, write_corpus, CorpusSpec};
use maskmatch_model::params::{Owner, ParamKind};
use maskmatch_model::preprocess::Normalization;
use maskmatch_model::training::{batch_loss, info_nce, train_step, FinetuneConfig, Moco, PairData, PretrainConfig, Sgd};
use maskmatch_model::{Architecture, BackboneSpec, EnsembleModel, ImageStore, ModelScorer, VerifierModel, VerifierSpec};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

struct Sweep {
    points: Vec<(f64, f64)>,
    eer: f64,
    frr100: f64,
    auc: f64,
}

/// Exhaustive threshold enumeration with plain counting loops.
fn sweep(auth: &[f64], imp: &[f64]) -> Sweep {
    let mut distinct: Vec<f64> = auth.iter().chain(imp).copied().collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let rate = |t: f64| {
        let fa = imp.iter().filter(|&&s| s >= t).count() as f64 / imp.len() as f64;
        let fr = auth.iter().filter(|&&s| s < t).count() as f64 / auth.len() as f64;
        (fa, fr)
    };
    let mut points = vec![(1.0, 0.0)];
    points.extend(distinct.iter().map(|&t| rate(t)));
    points.push((0.0, 1.0));

    let k = points.iter().position(|(fa, fr)| fa - fr <= 0.0).unwrap();
    let (fa1, fr1) = points[k];
    let eer = if k == 0 || fa1 == fr1 {
        (fa1 + fr1) / 2.0
    } else {
        let (fa0, fr0) = points[k - 1];
        let (d0, d1) = (fa0 - fr0, fa1 - fr1);
        fa0 + d0 / (d0 - d1) * (fa1 - fa0)
    };
    let frr100 = points.iter().filter(|(fa, _)| *fa < 0.01).map(|p| p.1).fold(1.0, f64::min);

    let mut wins = 0.0;
    for &a in auth {
        for &i in imp {
            wins += if a > i { 1.0 } else if a == i { 0.5 } else { 0.0 };
        }
    }
    Sweep { points, eer, frr100, auc: wins / (auth.len() * imp.len()) as f64 }
}

fn random_scores(rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let n_a = rng.random_range(1..=500);
    let n_i = rng.random_range(1..=500);
    let coarse = rng.random_bool(0.5);
    let shift: f64 = rng.random_range(0.0..0.4);
    let mut draw = |offset: f64| {
        let v: f64 = (rng.random::<f64>() * 0.6 + offset).min(1.0);
        if coarse {
            (v * 20.0).round() / 20.0
        } else {
            v
        }
    };
    let a = (0..n_a).map(|_| draw(shift)).collect();
    let i = (0..n_i).map(|_| draw(0.0)).collect();
    (a, i)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded(1);
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let (a, i) = random_scores(&mut rng);
        let set = ScoreSet::new(a.clone(), i.clone());
        let oracle = sweep(&a, &i);
        let curve = far_frr_curve(&set).map_err(|e| e.to_string())?;
        check(curve.len() == oracle.points.len(), || format!("set {trial}: curve has {} points, sweep {}", curve.len(), oracle.points.len()))?;
        for (p, &(fa, fr)) in curve.iter().zip(&oracle.points) {
            worst = worst.max((p.far - fa).abs()).max((p.frr - fr).abs());
        }
        let got = [eer(&set), frr100(&set), roc_auc(&set)].map(|r| r.unwrap());
        for (g, w) in got.iter().zip([oracle.eer, oracle.frr100, oracle.auc]) {
            worst = worst.max((g - w).abs());
        }
        check(worst <= 1e-9, || format!("set {trial}: deviation {worst:e}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("1000 sets, max deviation {worst:.1e}, {secs:.1} s"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let fixture = ScoreSet::new(vec![0.9, 0.8, 0.7, 0.4], vec![0.6, 0.5, 0.3, 0.2]);
    let e = eer(&fixture).unwrap();
    check((e - 0.25).abs() < 1e-12, || format!("fixture EER {e}"))?;

    let separated = ScoreSet::new(vec![0.8, 0.9, 0.95], vec![0.1, 0.2, 0.3]);
    let (e0, f0, a0) = (eer(&separated).unwrap(), frr100(&separated).unwrap(), roc_auc(&separated).unwrap());
    check(e0 == 0.0 && f0 == 0.0 && a0 == 1.0, || format!("separated: EER {e0}, FRR100 {f0}, AUC {a0}"))?;

    let mut rng = seeded(2);
    let a: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let i: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let same = ScoreSet::new(a, i);
    let (e1, a1) = (eer(&same).unwrap(), roc_auc(&same).unwrap());
    check((e1 - 0.5).abs() <= 0.02 && (a1 - 0.5).abs() <= 0.02, || format!("identical distributions: EER {e1}, AUC {a1}"))?;
    Ok(format!("fixture EER {e}; separated 0/0/1; identical EER {e1:.4} AUC {a1:.4}"))
}

// ---------------------------------------------------------------- 3

fn in_memory_index(dataset_id: &str, identities: usize, per_variant: usize) -> DatasetIndex {
    let mut records = Vec::new();
    for i in 0..identities {
        for j in 0..per_variant {
            for variant in [Variant::Unmasked, Variant::Masked] {
                let image_id = format!("{dataset_id}/{i:03}/{variant}/{j}");
                records.push(ImageRecord {
                    path: format!("{image_id}.png").into(),
                    image_id,
                    identity_id: format!("{dataset_id}_{i:03}"),
                    dataset_id: dataset_id.into(),
                    variant,
                });
            }
        }
    }
    DatasetIndex::new(dataset_id, "", records).unwrap()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let pool = PairPool::new(&in_memory_index("val", 40, 3), None);
    let stub_rng = Mutex::new(seeded(30));
    let stub = FnScorer(|_: &str, _: &str| stub_rng.lock().unwrap().random::<f64>());
    let p = validation_precision(&stub, &pool, 400, 19, &mut seeded(31)).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check((0.015..=0.085).contains(&p.precision), || format!("precision {}", p.precision))?;
    check(secs < 10.0, || format!("took {secs:.1} s"))?;
    Ok(format!("random stub precision {:.4} ({}/{}), {secs:.2} s", p.precision, p.successes, p.steps))
}

// ---------------------------------------------------------------- 4

fn noise_image(rng: &mut impl Rng) -> RgbImage {
    let (w, h) = (rng.random_range(8..48), rng.random_range(8..48));
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

fn criterion_4() -> Outcome {
    let spec = VerifierSpec::new(BackboneSpec::preset("tiny_cnn").map_err(|e| e.to_string())?);
    let model = VerifierModel::new(spec, 4).map_err(|e| e.to_string())?;
    let mut rng = seeded(40);
    for k in 0..100 {
        let (a, b) = (noise_image(&mut rng), noise_image(&mut rng));
        for tap in Tap::ALL {
            let ab = model.similarity(&a, &b, tap).unwrap();
            let ba = model.similarity(&b, &a, tap).unwrap();
            check(ab.to_bits() == ba.to_bits(), || format!("pair {k}, {tap}: {ab} vs {ba}"))?;
        }
        for tap in [Tap::Fc512, Tap::Bottleneck] {
            let s = model.similarity(&a, &a, tap).unwrap();
            check(s == 1.0, || format!("pair {k}, {tap}: self-similarity {s}"))?;
        }
    }
    Ok("100 random pairs, 3 taps symmetric, distance taps self-similar".into())
}

// ---------------------------------------------------------------- 5

fn convex_and_contains(poly: &[Point], points: &[Point]) -> bool {
    let n = poly.len();
    let turns = (0..n).all(|i| {
        let (a, b, c) = (poly[i], poly[(i + 1) % n], poly[(i + 2) % n]);
        (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x) > 0.0
    });
    let inside = points.iter().all(|p| {
        (0..n).all(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x) >= -1e-9
        })
    });
    n >= 3 && turns && inside
}

fn criterion_5() -> Outcome {
    let tools = MaskingTools::default();
    let config = MaskConfig::default();
    let corpus = smoke_corpus(48, 96, 50);
    let mut passed = 0;
    for (k, face) in corpus.iter().enumerate() {
        let Ok(out) = mask_image(&face.image, &tools, &config) else { continue };
        let selected: Vec<Point> = config.index_set.iter().map(|&i| out.landmarks.get(i).unwrap()).collect();
        check(convex_and_contains(out.polygon.vertices(), &selected), || format!("face {k}: polygon fails the oracle"))?;
        if verify_maskability(&out.image, tools.detector.as_ref()) {
            passed += 1;
        }
    }
    let rate = passed as f64 / corpus.len() as f64;
    check(rate >= 0.95, || format!("only {passed}/{} masked outputs verified", corpus.len()))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = CorpusSpec { dataset_id: "smoke".into(), identities: 24, images_per_identity: 2, size: 64, seed: 51 };
    let index = write_corpus(&spec, dir.path()).map_err(|e| e.to_string())?;
    let (masked, report) = mask_dataset(&index, &tools, &config, &dir.path().join("masked"), Some(1)).map_err(|e| e.to_string())?;
    check(report.masked_count + report.discarded_count == report.input_count && report.input_count == 48, || format!("{report:?}"))?;
    check(masked.len() == report.masked_count, || "index and report disagree".into())?;
    Ok(format!("{passed}/{} verified, polygons convex and cover their landmarks; dataset {}+{}={}", corpus.len(), report.masked_count, report.discarded_count, report.input_count))
}

// ---------------------------------------------------------------- 6

fn chi_square_p(counts: &[usize], probs: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    let stat: f64 = counts.iter().zip(probs).map(|(&c, &p)| (c as f64 - n as f64 * p).powi(2) / (n as f64 * p)).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

fn criterion_6() -> Outcome {
    let sizes: Vec<(String, usize)> = [("a", 120), ("b", 300), ("c", 80), ("d", 500)].iter().map(|(d, n)| (d.to_string(), *n)).collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    let mut ps = Vec::new();
    for (mode, seed) in [(DrawMode::Uniform, 60), (DrawMode::Stratified, 61)] {
        let strategy = DrawStrategy::from_sizes(mode, &sizes).map_err(|e| e.to_string())?;
        let mut rng = seeded(seed);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for _ in 0..10_000 {
            *counts.entry(choose_dataset(&strategy, &mut rng)).or_default() += 1;
        }
        let observed: Vec<usize> = sizes.iter().map(|(d, _)| counts.get(d.as_str()).copied().unwrap_or(0)).collect();
        let expected: Vec<f64> = match mode {
            DrawMode::Uniform => sizes.iter().map(|(_, n)| *n as f64 / total as f64).collect(),
            DrawMode::Stratified => vec![0.25; 4],
        };
        let p = chi_square_p(&observed, &expected);
        check(p > 0.001, || format!("{mode}: chi-square p {p:.2e} for {observed:?}"))?;
        ps.push(p);
    }

    let mut index = in_memory_index("x", 6, 3);
    for (d, n) in [("y", 4), ("z", 9)] {
        index = index.merge(&in_memory_index(d, n, 2), "all").unwrap();
    }
    let identity_dataset: BTreeMap<&str, &str> = index.records().iter().map(|r| (r.image_id.as_str(), r.dataset_id.as_str())).collect();
    let mut sampler = PairSampler::new(PairPool::new(&index, None), DrawMode::Uniform, 0.5, None, 62).map_err(|e| e.to_string())?;
    let mut imposters = 0;
    for _ in 0..2000 {
        let p = sampler.next_pair(None).map_err(|e| e.to_string())?;
        let same = identity_dataset[p.reference.as_str()] == p.dataset_id && identity_dataset[p.probe.as_str()] == p.dataset_id;
        check(same, || format!("pair crosses datasets: {p:?}"))?;
        imposters += usize::from(p.label == Label::Imposter);
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bench = in_memory_index("bench", 12, 4);
    for (k, count) in [10usize, 200, 384].into_iter().enumerate() {
        let list = generate_benchmark_pairs(&bench, count, 63).map_err(|e| e.to_string())?;
        check(list.count(Label::Authentic) == count / 2 && list.count(Label::Imposter) == count / 2, || format!("{count} pairs unbalanced"))?;
        let (f1, f2) = (dir.path().join(format!("{k}a.txt")), dir.path().join(format!("{k}b.txt")));
        list.export(&f1).map_err(|e| e.to_string())?;
        generate_benchmark_pairs(&bench, count, 63).unwrap().export(&f2).map_err(|e| e.to_string())?;
        check(std::fs::read(&f1).unwrap() == std::fs::read(&f2).unwrap(), || format!("{count} pairs: files differ"))?;
    }
    Ok(format!("chi-square p uniform {:.3}, stratified {:.3}; {imposters} imposter draws intra-dataset; lists balanced and byte-identical", ps[0], ps[1]))
}

// ---------------------------------------------------------------- 7

fn mlp(widths: Vec<usize>, head_width: usize, dtype: DType, seed: u64) -> VerifierModel {
    let spec = VerifierSpec {
        backbone: BackboneSpec { architecture: Architecture::Mlp { widths }, input_resolution: 1 },
        head_width,
        normalization: Normalization::identity(),
        fc512_point: Default::default(),
    };
    VerifierModel::with_dtype(spec, seed, dtype).unwrap()
}

fn random_input(m: &VerifierModel, n: usize, rng: &mut impl Rng) -> Tensor {
    let len = 3 * (m.input_resolution() as usize).pow(2);
    let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
    m.input_tensor(&refs).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn criterion_7() -> Outcome {
    // Gradients against central differences on a 17-parameter verifier.
    let m = mlp(vec![2], 2, DType::F64, 70);
    let mut rng = seeded(71);
    let (r, p) = (random_input(&m, 4, &mut rng), random_input(&m, 4, &mut rng));
    let labels = [1.0, 0.0, 0.0, 1.0];
    let loss_at = |m: &VerifierModel| batch_loss(m, &r, &p, &labels).unwrap().to_scalar::<f64>().unwrap();
    let grads = batch_loss(&m, &r, &p, &labels).unwrap().backward().unwrap();
    let mut worst_rel: f64 = 0.0;
    let mut count = 0;
    for param in m.params().iter().filter(|p| p.kind == ParamKind::Weight) {
        let base = flat(param.var.as_tensor());
        let g = flat(grads.get(param.var.as_tensor()).unwrap());
        for i in 0..base.len() {
            let h = 1e-6;
            let at = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                m.set_param(&param.name, &Tensor::from_vec(v, param.var.shape(), param.var.device()).unwrap()).unwrap();
                loss_at(&m)
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            at(0.0);
            worst_rel = worst_rel.max((g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(1e-8));
            count += 1;
        }
    }
    check(count <= 20 && worst_rel < 1e-4, || format!("{count} parameters, worst relative error {worst_rel:e}"))?;

    // Freezing half of a 10-layer backbone for 100 steps.
    let spec = VerifierSpec {
        backbone: BackboneSpec { architecture: Architecture::Mlp { widths: vec![4; 10] }, input_resolution: 2 },
        head_width: 4,
        normalization: Normalization::identity(),
        fc512_point: Default::default(),
    };
    let mut net = VerifierModel::new(spec, 72).unwrap();
    net.set_frozen_fraction(0.5).unwrap();
    let before: Vec<Vec<f64>> = net.params().iter().map(|p| flat(p.var.as_tensor())).collect();
    let mut sgd = Sgd::plain(0.5);
    for _ in 0..100 {
        let (r, p) = (random_input(&net, 4, &mut rng), random_input(&net, 4, &mut rng));
        train_step(&net, &mut sgd, &r, &p, &[1.0, 0.0, 1.0, 0.0]).unwrap();
    }
    for (param, old) in net.params().iter().zip(&before) {
        let new = flat(param.var.as_tensor());
        let same = old.iter().zip(&new).all(|(a, b)| a.to_bits() == b.to_bits());
        if matches!(param.owner, Owner::Backbone(i) if i < 5) {
            check(same, || format!("{} moved while frozen", param.name))?;
        } else if param.name.ends_with(".weight") {
            check(!same, || format!("{} never moved", param.name))?;
        }
    }

    // Uniform logits over 1 + queue_size classes.
    let k = 4096;
    let logits = Tensor::from_vec(vec![0.37f64; 3 * (k + 1)], (3, k + 1), &candle_core::Device::Cpu).unwrap();
    let l = info_nce(&logits).unwrap().to_scalar::<f64>().unwrap();
    let want = ((k + 1) as f64).ln();
    check((l - want).abs() < 1e-6, || format!("uniform logits loss {l}, want {want}"))?;

    // Momentum encoder closed form.
    let spec = VerifierSpec::new(BackboneSpec::preset("tiny_cnn").unwrap().with_resolution(16));
    let cfg = PretrainConfig { batch_size: 4, queue_size: 16, momentum_coefficient: 0.99, projection_dim: 16, learning_rate: 0.1, ..Default::default() };
    let mut moco = Moco::new(VerifierModel::new(spec, 73).unwrap(), &cfg).unwrap();
    let mut worst_m: f64 = 0.0;
    for _ in 0..3 {
        let old: Vec<Vec<f64>> = moco.key_weights().iter().map(|p| flat(p.var.as_tensor())).collect();
        let q = random_input(moco.online(), 4, &mut rng);
        let kx = random_input(moco.online(), 4, &mut rng);
        moco.step(&q, &kx).unwrap();
        let online: Vec<Vec<f64>> = moco.online_weights().iter().map(|p| flat(p.var.as_tensor())).collect();
        for ((o, n), kp) in old.iter().zip(&online).zip(moco.key_weights()) {
            for ((o, n), k) in o.iter().zip(n).zip(flat(kp.var.as_tensor())) {
                worst_m = worst_m.max((k - (0.99 * o + 0.01 * n)).abs());
            }
        }
        check(moco.queue().len() == 16, || "queue size drifted".into())?;
    }
    check(worst_m < 1e-6, || format!("momentum deviation {worst_m:e}"))?;
    Ok(format!("grad rel err {worst_rel:.1e} over {count} params; frozen layers bit-identical; ln(K+1) within {:.1e}; momentum within {worst_m:.1e}", (l - want).abs()))
}

// ---------------------------------------------------------------- 8

struct DeskCorpus {
    _dir: tempfile::TempDir,
    index: DatasetIndex,
    splits: maskmatch_core::registry::Splits,
    images: ImageStore,
}

fn desk_corpus(dir: tempfile::TempDir) -> Result<DeskCorpus, String> {
    let spec = CorpusSpec { dataset_id: "desk".into(), identities: 40, images_per_identity: 8, size: 64, seed: 80 };
    let unmasked = write_corpus(&spec, dir.path()).map_err(|e| e.to_string())?;
    let (masked, report) =
        mask_dataset(&unmasked, &MaskingTools::default(), &MaskConfig::default(), &dir.path().join("masked"), None).map_err(|e| e.to_string())?;
    log(&format!("    masked {}/{} images", report.masked_count, report.input_count));
    let index = unmasked.merge(&masked, "desk").map_err(|e| e.to_string())?;
    let splits = split_identities(&index, (0.5, 0.25), 81).map_err(|e| e.to_string())?;
    let images = ImageStore::from_index(&index);
    Ok(DeskCorpus { _dir: dir, index, splits, images })
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn holdout_eer(model: &VerifierModel, corpus: &DeskCorpus, tap: Tap) -> Result<f64, String> {
    let holdout = corpus.index.restrict_identities(corpus.splits.role(Role::Holdout));
    let list = generate_benchmark_pairs(&holdout, 600, 82).map_err(|e| e.to_string())?;
    let scorer = ModelScorer::new(model, &corpus.images, tap).map_err(|e| e.to_string())?;
    let set = score_pairs(&scorer, &list, Provenance::default()).map_err(|e| e.to_string())?;
    eer(&set).map_err(|e| e.to_string())
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let corpus = desk_corpus(tempfile::tempdir().map_err(|e| e.to_string())?)?;
    let counts = Role::ALL.map(|r| corpus.splits.role(r).len());
    check(counts == [20, 10, 10], || format!("split sizes {counts:?}"))?;
    let data = PairData::from_splits(&corpus.index, &corpus.splits, &corpus.images);

    let mut spec = VerifierSpec::new(BackboneSpec::preset("tiny_cnn").unwrap().with_resolution(24));
    // The logit's common-mode response to one SGD step grows with the head
    // width; a narrow head tolerates the large step that learns in budget.
    spec.head_width = 32;
    let untrained = VerifierModel::new(spec.clone(), 83).map_err(|e| e.to_string())?;
    let base_precision = {
        let scorer = ModelScorer::new(&untrained, &corpus.images, Tap::Final).map_err(|e| e.to_string())?;
        validation_precision(&scorer, &data.validation, 400, 19, &mut seeded(84)).map_err(|e| e.to_string())?.precision
    };
    let base_eer = holdout_eer(&untrained, &corpus, Tap::Bottleneck)?;
    log(&format!("    untrained: validation precision {base_precision:.3}, holdout EER {base_eer:.3}"));

    let mut cfg = FinetuneConfig::new("desk", 1500, 32, 1.0);
    cfg.validation_interval = 250;
    cfg.retention_threshold = 0.5;
    cfg.seed = 85;
    let run = maskmatch_model::training::finetune_supervised(untrained, &cfg, &data, None).map_err(|e| e.to_string())?;
    for (k, w) in run.losses.chunks(250).enumerate() {
        log(&format!("    mean loss over steps {}..{}: {:.4}", k * 250 + 1, k * 250 + w.len(), w.iter().sum::<f64>() / w.len() as f64));
    }
    for e in &run.trail {
        log(&format!("    step {}: validation precision {:.3}", e.step, e.precision));
    }
    let (best, model) = run.best.as_ref().ok_or("no validation ran")?;
    let trained_eer = holdout_eer(model, &corpus, Tap::Bottleneck)?;
    let final_eer = holdout_eer(model, &corpus, Tap::Final)?;
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "precision {:.3} at step {} (untrained {base_precision:.3}); holdout EER {trained_eer:.3} bottleneck, {final_eer:.3} final (untrained {base_eer:.3}); {secs:.0} s",
        best.precision, best.step
    );
    check(secs <= 600.0, || format!("over budget: {summary}"))?;
    check(best.precision >= 0.5 && best.precision >= 10.0 * 0.05, || summary.clone())?;
    check(trained_eer < 0.35, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let index = in_memory_index("mine", 12, 2);
    let pool = PairPool::new(&index, None);
    let mut rng = seeded(90);
    let mut ties = 0;
    for trial in 0..100 {
        // Coarse values make ties common.
        let table: BTreeMap<String, f64> = index.records().iter().map(|r| (r.image_id.clone(), f64::from(rng.random_range(0..5u8)) / 4.0)).collect();
        let seen = Mutex::new(Vec::new());
        let stub = FnScorer(|_: &str, probe: &str| {
            seen.lock().unwrap().push(probe.to_string());
            table[probe]
        });
        let reference = format!("mine_{:03}", trial % 12);
        let k = rng.random_range(1..=15);
        let pair = mine_hard_imposter(&pool, "mine", &reference, k, &stub, &mut rng).map_err(|e| e.to_string())?;
        let seen = seen.into_inner().unwrap();
        let top = seen.iter().map(|p| table[p]).fold(f64::MIN, f64::max);
        let first = seen.iter().find(|p| table[p.as_str()] == top).unwrap();
        ties += usize::from(seen.iter().filter(|p| table[p.as_str()] == top).count() > 1);
        check(&pair.probe == first, || format!("trial {trial}: got {} but first argmax is {first}", pair.probe))?;
        check(pair.label == Label::Imposter && !pair.probe.starts_with(&format!("mine/{:03}/", trial % 12)), || format!("trial {trial}: not an imposter"))?;
    }
    Ok(format!("100/100 trials returned the first argmax ({ties} with ties)"))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let stub = |k: u64| {
        FnScorer(move |a: &str, b: &str| {
            let h = a.bytes().chain(b.bytes()).fold(k.wrapping_mul(0x9e37_79b9), |h, c| h.wrapping_mul(31).wrapping_add(u64::from(c)));
            (h % 10_007) as f64 / 10_007.0
        })
    };
    let pairs = [("r1", "p1"), ("r2", "p9"), ("x", "y"), ("y", "x")];
    let members = vec![stub(1), stub(2), stub(3)];
    let separate: Vec<Vec<f64>> = members.iter().map(|m| m.score_pairs(&pairs).unwrap()).collect();
    let ensemble = MeanEnsemble::new(members).ok_or("empty ensemble")?;
    let got = ensemble.score_pairs(&pairs).unwrap();
    let mut worst: f64 = 0.0;
    for (j, g) in got.iter().enumerate() {
        worst = worst.max((g - (separate[0][j] + separate[1][j] + separate[2][j]) / 3.0).abs());
    }
    check(worst <= 1e-12, || format!("stub ensemble deviation {worst:e}"))?;
    let single = MeanEnsemble::new(vec![stub(5)]).unwrap().score_pairs(&pairs).unwrap();
    check(single == stub(5).score_pairs(&pairs).unwrap(), || "singleton stub ensemble differs".into())?;

    let spec = VerifierSpec::new(BackboneSpec::preset("tiny_cnn").unwrap().with_resolution(16));
    let models: Vec<VerifierModel> = (0..3).map(|s| VerifierModel::new(spec.clone(), 100 + s).unwrap()).collect();
    let mut rng = seeded(101);
    let (a, b) = (noise_image(&mut rng), noise_image(&mut rng));
    let each: Vec<f64> = models.iter().map(|m| m.similarity(&a, &b, Tap::Bottleneck).unwrap()).collect();
    let ens = EnsembleModel::new(models).unwrap();
    let dev = (ens.similarity(&a, &b).unwrap() - each.iter().sum::<f64>() / 3.0).abs();
    check(dev <= 1e-12, || format!("model ensemble deviation {dev:e}"))?;
    let lone = VerifierModel::new(spec, 100).unwrap();
    let direct = lone.similarity(&a, &b, Tap::Bottleneck).unwrap();
    check(EnsembleModel::new(vec![lone]).unwrap().similarity(&a, &b).unwrap() == direct, || "singleton model ensemble differs".into())?;
    Ok(format!("stub mean within {worst:.1e}, model mean within {dev:.1e}; singletons exact"))
}

// ----------------------------------------------------------------

const CRITERIA: [(&str, fn() -> Outcome); 10] = [
    ("metrics oracle equivalence", criterion_1),
    ("hand-computable fixtures", criterion_2),
    ("random-baseline protocol", criterion_3),
    ("symmetry and self-similarity", criterion_4),
    ("mask pipeline", criterion_5),
    ("sampling distributions", criterion_6),
    ("training mechanics", criterion_7),
    ("desk-scale learning signal", criterion_8),
    ("hard mining", criterion_9),
    ("ensemble averaging", criterion_10),
];

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (k, (name, run)) in CRITERIA.iter().enumerate() {
        let n = k + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS [{n}] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{n}] {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
