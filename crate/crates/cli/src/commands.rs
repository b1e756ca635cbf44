//! One function per subcommand. Each reads its (already resolved and
//! frozen) config section and writes into the run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use maskmatch_core::geometry::{mask_dataset, write_masking_report, MaskingTools};
use maskmatch_core::metrics::{score_pairs, MetricError, Provenance};
use maskmatch_core::pairs::{generate_benchmark_pairs, BenchmarkPairList};
use maskmatch_core::registry::{
    load_manifest_with_root, split_identities, write_manifest, DatasetIndex, Role, Splits, DATA_ROOT_ENV,
};
use maskmatch_core::report::{emit_report, write_metrics, MetricReport, MetricsRecord, MetricsTable};
use maskmatch_core::rng::derive_seed;
use maskmatch_core::scoring::{PairScorer, Tap};
use maskmatch_core::synth::{write_corpus, CorpusSpec};
use maskmatch_model::checkpoint::{load_model, save_representation, save_verifier};
use maskmatch_model::training::{multi_dataset_finetune, pretrain_contrastive, DatasetSplit, FinetuneConfig, TrainingRun};
use maskmatch_model::{ensemble_scorer, BackboneSpec, EnsembleModel, ImageStore, Lineage, ModelScorer, VerifierModel, VerifierSpec};
use serde::Serialize;

use crate::config::*;
use crate::error::{classify_model, CliError, CliResult, Classify, Kind};
use crate::run_dir::RunDir;

pub struct Ctx {
    pub seed: u64,
    pub data_root: Option<PathBuf>,
    pub workers: Option<usize>,
    pub run: RunDir,
}

impl Ctx {
    fn load_index(&self, path: &Path) -> CliResult<DatasetIndex> {
        let root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).or_else(|| self.data_root.clone());
        load_manifest_with_root(path, root).with_context(|| format!("manifest {}", path.display())).or_data()
    }

    fn load_split(&self, d: &DataSection) -> CliResult<(DatasetIndex, Splits)> {
        let index = self.load_index(&d.manifest)?;
        let splits = match &d.splits {
            Some(p) => Splits::read(p).with_context(|| format!("split file {}", p.display())).or_data()?,
            None => split_identities(&index, d.fractions, split_seed(self.seed, index.dataset_id()))
                .with_context(|| format!("splitting {}", index.dataset_id()))
                .or_data()?,
        };
        let dir = self.run.join("splits");
        fs::create_dir_all(&dir).with_context(|| dir.display().to_string()).or_data()?;
        let out = dir.join(format!("{}.txt", index.dataset_id()));
        splits.write(&out).or_data()?;
        Ok((index, splits))
    }

    fn build_model(&self, m: &ModelSection, label: &str) -> CliResult<VerifierModel> {
        let seed = derive_seed(self.seed, &format!("model/{label}"));
        if let Some(path) = &m.init {
            return load_model(path, seed).map_err(classify_model);
        }
        let mut backbone = BackboneSpec::preset(&m.backbone).map_err(classify_model)?;
        if let Some(r) = m.resolution {
            backbone = backbone.with_resolution(r);
        }
        let mut spec = VerifierSpec::new(backbone);
        if let Some(h) = m.head_width {
            spec.head_width = h;
        }
        VerifierModel::new(spec, seed).map_err(classify_model)
    }

    /// Pair lists for every holdout: read from file, or one generated list
    /// per dataset of the manifest (saved under `pairs/`).
    fn holdout_lists(&self, holdouts: &[HoldoutSection], images: &mut ImageStore) -> CliResult<Vec<BenchmarkPairList>> {
        let mut lists = Vec::new();
        for h in holdouts {
            let index = self.load_index(&h.manifest)?;
            images.add_index(&index);
            match &h.pairs {
                Some(p) => lists.push(read_pair_list(p, &index)?),
                None => {
                    for ds in index.datasets() {
                        let list = self.generate_pairs(&index.subset_dataset(&ds), h.pair_count)?;
                        lists.push(list);
                    }
                }
            }
        }
        Ok(lists)
    }

    fn generate_pairs(&self, index: &DatasetIndex, count: usize) -> CliResult<BenchmarkPairList> {
        let ds = index.dataset_id();
        let list = generate_benchmark_pairs(index, count, pair_seed(self.seed, ds))
            .with_context(|| format!("pairs for {ds}"))
            .or_data()?;
        list.export(self.run.join("pairs").join(format!("{ds}.csv"))).or_data()?;
        Ok(list)
    }
}

pub fn split_seed(seed: u64, dataset_id: &str) -> u64 {
    derive_seed(seed, &format!("split/{dataset_id}"))
}

pub fn pair_seed(seed: u64, dataset_id: &str) -> u64 {
    derive_seed(seed, &format!("pairs/{dataset_id}"))
}

fn read_pair_list(path: &Path, index: &DatasetIndex) -> CliResult<BenchmarkPairList> {
    let list = BenchmarkPairList::import(path).with_context(|| format!("pair list {}", path.display())).or_data()?;
    list.validate(index).with_context(|| format!("pair list {}", path.display())).or_data()?;
    Ok(list)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).or_run()? + "\n";
    fs::write(path, text).with_context(|| path.display().to_string()).or_data()
}

fn evaluate(scorer: &dyn PairScorer, list: &BenchmarkPairList, model_id: &str, tap: &str) -> CliResult<MetricReport> {
    let provenance = Provenance {
        model_id: model_id.to_string(),
        tap: tap.to_string(),
        pair_list_id: format!("{}#{}", list.dataset_id, list.seed),
    };
    let scores = score_pairs(scorer, list, provenance).map_err(|e| {
        let kind = if matches!(e, MetricError::MissingImage { .. }) { Kind::Data } else { Kind::Run };
        CliError { kind, error: anyhow::Error::new(e).context(format!("scoring {model_id} on {}", list.dataset_id)) }
    })?;
    MetricReport::from_scores(&scores).or_run()
}

fn model_scorer<'a>(m: &'a VerifierModel, images: &'a ImageStore, tap: Tap) -> CliResult<ModelScorer<'a>> {
    ModelScorer::new(m, images, tap).map_err(classify_model)
}

/// Weights at the best validation, or the last weights if none ran.
fn best_model(run: &TrainingRun) -> &VerifierModel {
    run.best.as_ref().map_or(&run.model, |(_, m)| m)
}

fn finetune(
    model: VerifierModel,
    config: &FinetuneConfig,
    data: &[(DatasetIndex, Splits)],
    images: &ImageStore,
    dir: &Path,
) -> CliResult<TrainingRun> {
    let splits: Vec<DatasetSplit<'_>> = data.iter().map(|(index, splits)| DatasetSplit { index, splits }).collect();
    let run = multi_dataset_finetune(model, config, &splits, images, Some(dir)).map_err(classify_model)?;
    save_verifier(&run.model, dir.join("final.safetensors")).map_err(classify_model)?;
    save_verifier(best_model(&run), dir.join("best.safetensors")).map_err(classify_model)?;
    write_json(&dir.join("trail.json"), &run.trail)?;
    if let Some((best, _)) = &run.best {
        log::info!("{}: best validation precision {:.3} at step {}", config.name, best.precision, best.step);
    }
    Ok(run)
}

fn image_store(data: &[(DatasetIndex, Splits)]) -> ImageStore {
    let mut images = ImageStore::new();
    for (index, _) in data {
        images.add_index(index);
    }
    images
}

// ---------------------------------------------------------------- commands

pub fn synth(ctx: &Ctx, s: &SynthSection) -> CliResult<()> {
    let spec = CorpusSpec {
        dataset_id: s.dataset.clone(),
        identities: s.identities,
        images_per_identity: s.images_per_identity,
        size: s.size,
        seed: derive_seed(ctx.seed, "synth"),
    };
    let index = write_corpus(&spec, &ctx.run.join("images")).or_data()?;
    write_manifest(&index, ctx.run.join("manifest.csv")).or_data()?;
    println!("wrote {} images of {} identities to {}", index.len(), s.identities, ctx.run.path().display());
    Ok(())
}

#[derive(Serialize)]
struct MaskSummary {
    input_count: usize,
    masked_count: usize,
    discarded_count: usize,
    io_failures: usize,
}

pub fn mask(ctx: &Ctx, s: &MaskSection) -> CliResult<()> {
    let index = ctx.load_index(&s.manifest)?;
    let tools = MaskingTools::from_config(&s.params).or_data()?;
    let (masked, report) = mask_dataset(&index, &tools, &s.params, ctx.run.path(), ctx.workers).or_data()?;
    write_manifest(&masked, ctx.run.join("masked_manifest.csv")).or_data()?;
    let merged = index.merge(&masked, index.dataset_id()).or_data()?;
    write_manifest(&merged, ctx.run.join("manifest.csv")).or_data()?;
    write_masking_report(&report, ctx.run.join("masking_report.csv")).or_data()?;
    let summary = MaskSummary {
        input_count: report.input_count,
        masked_count: report.masked_count,
        discarded_count: report.discarded_count,
        io_failures: report.io_failures(),
    };
    write_json(&ctx.run.join("masking_summary.json"), &summary)?;
    println!("masked {} of {} images ({} discarded)", report.masked_count, report.input_count, report.discarded_count);
    if summary.io_failures > 0 {
        return Err(CliError::data(format!(
            "{} images could not be read or written; see {}",
            summary.io_failures,
            ctx.run.join("masking_report.csv").display()
        )));
    }
    Ok(())
}

pub fn split(ctx: &Ctx, s: &SplitSection) -> CliResult<()> {
    let index = ctx.load_index(&s.manifest)?;
    let splits = split_identities(&index, s.fractions, split_seed(ctx.seed, index.dataset_id())).or_data()?;
    splits.write(ctx.run.join("splits.txt")).or_data()?;
    let counts: Vec<String> = Role::ALL.iter().map(|&r| format!("{r} {}", splits.role(r).len())).collect();
    println!("{}: {}", index.dataset_id(), counts.join(", "));
    Ok(())
}

pub fn pairs(ctx: &Ctx, s: &PairsSection) -> CliResult<()> {
    let mut index = ctx.load_index(&s.manifest)?;
    if let Some(p) = &s.splits {
        let splits = Splits::read(p).with_context(|| format!("split file {}", p.display())).or_data()?;
        index = index.restrict_identities(splits.role(s.role));
    }
    for ds in index.datasets() {
        let list = ctx.generate_pairs(&index.subset_dataset(&ds), s.count)?;
        println!("{ds}: {} pairs", list.pairs.len());
    }
    Ok(())
}

pub fn pretrain(ctx: &Ctx, s: &PretrainSection) -> CliResult<()> {
    let data: Vec<(DatasetIndex, Splits)> = s.datasets.iter().map(|d| ctx.load_split(d)).collect::<CliResult<_>>()?;
    let images = image_store(&data);
    let ids = training_images(&data);
    let model = ctx.build_model(&s.model, "pretrain")?;
    let run = pretrain_contrastive(model, &s.params, &images, &ids, Some(ctx.run.path())).map_err(classify_model)?;
    println!(
        "{} steps, final loss {:.4}; representation in {}",
        run.losses.len(),
        run.losses.last().copied().unwrap_or(f64::NAN),
        ctx.run.join("representation.safetensors").display()
    );
    Ok(())
}

/// Every image, both variants, of the training identities.
fn training_images(data: &[(DatasetIndex, Splits)]) -> Vec<String> {
    data.iter()
        .flat_map(|(index, splits)| {
            let train = splits.role(Role::Train);
            index.records().iter().filter(|r| train.contains(&r.identity_id)).map(|r| r.image_id.clone())
        })
        .collect()
}

pub fn finetune_cmd(ctx: &Ctx, s: &FinetuneSection) -> CliResult<()> {
    let data: Vec<(DatasetIndex, Splits)> = s.datasets.iter().map(|d| ctx.load_split(d)).collect::<CliResult<_>>()?;
    let images = image_store(&data);
    let model = ctx.build_model(&s.model, &s.run.0.name)?;
    let run = finetune(model, &s.run.0, &data, &images, ctx.run.path())?;
    match &run.best {
        Some((best, _)) => println!("{}: best validation precision {:.3} at step {}", s.run.0.name, best.precision, best.step),
        None => println!("{}: no validation ran", s.run.0.name),
    }
    Ok(())
}

pub fn evaluate_cmd(ctx: &Ctx, s: &EvaluateSection) -> CliResult<()> {
    if s.checkpoints.is_empty() {
        return Err(CliError::usage("evaluate needs at least one checkpoint"));
    }
    if s.ensemble && s.tap != Tap::Bottleneck {
        return Err(CliError::usage("ensembles average bottleneck similarities; drop --tap or use --tap bottleneck"));
    }
    let mut index: Option<DatasetIndex> = None;
    for m in &s.manifests {
        let next = ctx.load_index(m)?;
        index = Some(match index {
            None => next,
            Some(acc) => acc.merge(&next, acc.dataset_id().to_string()).or_data()?,
        });
    }
    let index = index.ok_or_else(|| CliError::usage("evaluate needs at least one manifest"))?;
    let images = ImageStore::from_index(&index);
    let list = read_pair_list(&s.pairs, &index)?;

    let head_seed = derive_seed(ctx.seed, "evaluate/head");
    let mut members = Vec::new();
    for path in &s.checkpoints {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string());
        members.push((id, load_model(path, head_seed).map_err(classify_model)?));
    }

    let mut reports = Vec::new();
    if s.ensemble {
        let ids: Vec<String> = members.iter().map(|(id, _)| id.clone()).collect();
        let ensemble = EnsembleModel::new(members.into_iter().map(|(_, m)| m).collect()).map_err(classify_model)?;
        let scorer = ensemble_scorer(&ensemble, &images).map_err(classify_model)?;
        reports.push(evaluate(&scorer, &list, &format!("ensemble[{}]", ids.join("+")), Tap::Bottleneck.as_str())?);
    } else {
        for (id, m) in &members {
            reports.push(evaluate(&model_scorer(m, &images, s.tap)?, &list, id, s.tap.as_str())?);
        }
    }
    let mut records = Vec::new();
    for r in &reports {
        emit_report(r, &list.dataset_id, ctx.seed, ctx.run.path()).or_data()?;
        records.push(MetricsRecord::new(r, &list.dataset_id, ctx.seed));
        println!("{} on {} ({}): EER {:.4}, FRR100 {:.4}, AUC {:.4}", r.provenance.model_id, list.dataset_id, r.provenance.tap, r.eer, r.frr100, r.auc);
    }
    write_metrics(&records, ctx.run.join("metrics.jsonl")).or_data()?;
    Ok(())
}

pub fn benchmark1(ctx: &Ctx, s: &Benchmark1Section) -> CliResult<()> {
    let ids: Vec<String> = s.models.iter().map(ModelSection::model_id).collect();
    if ids.is_empty() || ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
        return Err(CliError::usage("benchmark1 needs at least one model and distinct model ids"));
    }
    if s.holdouts.is_empty() {
        return Err(CliError::usage("benchmark1 needs at least one holdout manifest"));
    }
    let data = vec![ctx.load_split(&s.train)?];
    let mut images = image_store(&data);
    let lists = ctx.holdout_lists(&s.holdouts, &mut images)?;

    let mut table = MetricsTable::new("eer");
    let mut records = Vec::new();
    for (m, id) in s.models.iter().zip(&ids) {
        let model = ctx.build_model(m, id)?;
        let mut config = s.run.0.clone();
        config.name = id.clone();
        let run = finetune(model, &config, &data, &images, &ctx.run.join("models").join(id))?;
        let best = best_model(&run);
        for list in &lists {
            let report = evaluate(&model_scorer(best, &images, s.tap)?, list, id, s.tap.as_str())?;
            table.set(&list.dataset_id, id, report.eer);
            records.push(MetricsRecord::new(&report, &list.dataset_id, ctx.seed));
        }
    }
    write_metrics(&records, ctx.run.join("metrics.jsonl")).or_data()?;
    table.write(ctx.run.path(), "table4_eer").or_data()?;
    print!("{}", table.to_markdown());
    Ok(())
}

#[derive(Serialize)]
struct LineageRow<'a> {
    run: &'a str,
    base: Option<&'a str>,
    best_step: Option<u64>,
    best_precision: Option<f64>,
    best_checkpoint_id: Option<&'a str>,
}

#[derive(Serialize)]
struct Candidate<'a> {
    run: &'a str,
    step: u64,
    checkpoint_id: &'a str,
    precision: f64,
    path: Option<&'a Path>,
}

/// Orders runs so every run comes after the run it starts from.
fn run_order(runs: &[RunSpec]) -> CliResult<Vec<usize>> {
    let names: Vec<&str> = runs.iter().map(|r| r.0.name.as_str()).collect();
    if names.iter().collect::<BTreeSet<_>>().len() != names.len() {
        return Err(CliError::usage("benchmark2 run names must be distinct"));
    }
    for r in runs {
        if let Some(b) = &r.0.base_checkpoint {
            if !names.contains(&b.as_str()) {
                return Err(CliError::usage(format!("run {}: base {b:?} is not a run of this benchmark", r.0.name)));
            }
        }
    }
    let mut order = Vec::new();
    let mut done = BTreeSet::new();
    while order.len() < runs.len() {
        let ready = (0..runs.len())
            .find(|&i| !done.contains(&i) && runs[i].0.base_checkpoint.as_ref().is_none_or(|b| done.iter().any(|&j| names[j] == b)))
            .ok_or_else(|| CliError::usage("benchmark2 runs form a base cycle"))?;
        done.insert(ready);
        order.push(ready);
    }
    Ok(order)
}

pub fn benchmark2(ctx: &Ctx, s: &Benchmark2Section) -> CliResult<()> {
    if s.datasets.len() < 2 {
        return Err(CliError::usage("benchmark2 needs at least two training datasets"));
    }
    if s.runs.is_empty() || s.holdouts.is_empty() {
        return Err(CliError::usage("benchmark2 needs runs and holdout manifests"));
    }
    let order = run_order(&s.runs)?;
    let data: Vec<(DatasetIndex, Splits)> = s.datasets.iter().map(|d| ctx.load_split(d)).collect::<CliResult<_>>()?;
    let mut images = image_store(&data);
    let lists = ctx.holdout_lists(&s.holdouts, &mut images)?;

    let mut base = ctx.build_model(&s.model, "benchmark2")?;
    let representation = match &s.pretrain {
        Some(p) => {
            let dir = ctx.run.join("pretrain");
            base = pretrain_contrastive(base, p, &images, &training_images(&data), Some(&dir)).map_err(classify_model)?.model;
            dir.join("representation.safetensors")
        }
        None => {
            base.set_lineage(Lineage { checkpoint_id: "init".into(), base: None, step: 0 });
            let path = ctx.run.join("representation.safetensors");
            save_representation(&base, &path).map_err(classify_model)?;
            path
        }
    };
    drop(base);

    let mut results: BTreeMap<usize, TrainingRun> = BTreeMap::new();
    for &i in &order {
        let config = &s.runs[i].0;
        let model = match &config.base_checkpoint {
            None => load_model(&representation, derive_seed(ctx.seed, &format!("head/{}", config.name))).map_err(classify_model)?,
            Some(b) => {
                let (_, from) = results.iter().find(|(&j, _)| &s.runs[j].0.name == b).expect("ordered after its base");
                best_model(from).deep_clone().map_err(classify_model)?
            }
        };
        let run = finetune(model, config, &data, &images, &ctx.run.join("runs").join(&config.name))?;
        results.insert(i, run);
    }

    let lineage: Vec<LineageRow<'_>> = (0..s.runs.len())
        .map(|i| {
            let run = &results[&i];
            let best = run.best.as_ref().map(|(e, _)| e);
            LineageRow {
                run: &run.config.name,
                base: best_model(run).lineage().base.as_deref(),
                best_step: best.map(|e| e.step),
                best_precision: best.map(|e| e.precision),
                best_checkpoint_id: best.map(|e| e.checkpoint_id.as_str()),
            }
        })
        .collect();
    write_json(&ctx.run.join("lineage.json"), &lineage)?;
    let candidates: Vec<Candidate<'_>> = (0..s.runs.len())
        .flat_map(|i| results[&i].trail.iter().map(move |e| (i, e)))
        .filter(|(_, e)| e.precision >= s.precision_filter)
        .map(|(i, e)| Candidate {
            run: &s.runs[i].0.name,
            step: e.step,
            checkpoint_id: &e.checkpoint_id,
            precision: e.precision,
            path: e.path.as_deref(),
        })
        .collect();
    write_json(&ctx.run.join("candidates.json"), &candidates)?;

    // Finetuned runs (those starting from another run), best first.
    let mut ranked: Vec<usize> = (0..s.runs.len()).filter(|&i| s.runs[i].0.base_checkpoint.is_some()).collect();
    let precision = |i: usize| results[&i].best.as_ref().map_or(f64::NEG_INFINITY, |(e, _)| e.precision);
    ranked.sort_by(|&a, &b| precision(b).total_cmp(&precision(a)));
    ranked.truncate(s.ensemble_size);
    let ensemble = if ranked.is_empty() {
        None
    } else {
        let members = ranked.iter().map(|i| best_model(&results[i]).deep_clone()).collect::<Result<Vec<_>, _>>().map_err(classify_model)?;
        let names: Vec<&str> = ranked.iter().map(|&i| s.runs[i].0.name.as_str()).collect();
        write_json(&ctx.run.join("ensemble.json"), &names)?;
        Some(EnsembleModel::new(members).map_err(classify_model)?)
    };

    let mut eer = MetricsTable::new("eer");
    let mut frr100 = MetricsTable::new("frr100");
    let mut records = Vec::new();
    for list in &lists {
        let mut put = |report: MetricReport| {
            eer.set(&list.dataset_id, &report.provenance.model_id, report.eer);
            frr100.set(&list.dataset_id, &report.provenance.model_id, report.frr100);
            records.push(MetricsRecord::new(&report, &list.dataset_id, ctx.seed));
        };
        for i in 0..s.runs.len() {
            let name = &s.runs[i].0.name;
            put(evaluate(&model_scorer(best_model(&results[&i]), &images, s.tap)?, list, name, s.tap.as_str())?);
        }
        if let Some(e) = &ensemble {
            let scorer = ensemble_scorer(e, &images).map_err(classify_model)?;
            put(evaluate(&scorer, list, "Ensemble", Tap::Bottleneck.as_str())?);
        }
    }
    write_metrics(&records, ctx.run.join("metrics.jsonl")).or_data()?;
    eer.write(ctx.run.path(), "table5_eer").or_data()?;
    frr100.write(ctx.run.path(), "table6_frr100").or_data()?;
    print!("EER\n{}\nFRR100\n{}", eer.to_markdown(), frr100.to_markdown());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str, base: Option<&str>) -> RunSpec {
        let mut c = FinetuneConfig::new(name, 1, 1, 0.1);
        c.base_checkpoint = base.map(str::to_string);
        RunSpec(c)
    }

    #[test]
    fn runs_follow_their_base() {
        let runs = [spec("FT1", Some("CP1")), spec("FT3", Some("CP2")), spec("CP1", None), spec("CP2", None)];
        assert_eq!(run_order(&runs).unwrap(), vec![2, 0, 3, 1]);
        assert!(run_order(&[spec("A", Some("B")), spec("B", Some("A"))]).is_err());
        assert!(run_order(&[spec("A", Some("Z"))]).is_err());
        assert!(run_order(&[spec("A", None), spec("A", None)]).is_err());
    }
}
