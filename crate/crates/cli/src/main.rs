//! `maskmatch`: masking, splitting, pair generation, training and
//! evaluation runs driven by a TOML config.

mod commands;
mod config;
mod error;
mod run_dir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use maskmatch_core::registry::Role;
use maskmatch_core::rng::derive_seed;
use maskmatch_core::scoring::Tap;

use commands::Ctx;
use config::*;
use error::{CliError, CliResult};
use run_dir::RunDir;

#[derive(Parser, Debug)]
#[command(name = "maskmatch", version, about = "Masked-probe face verification runs")]
struct Cli {
    /// TOML run config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides `paths.run_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Similarity tap for evaluation.
    #[arg(long, global = true, value_parser = parse_tap)]
    tap: Option<Tap>,
    /// Average the bottleneck similarities of all checkpoints.
    #[arg(long, global = true)]
    ensemble: bool,
    /// Worker threads for masking.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

fn parse_tap(s: &str) -> Result<Tap, String> {
    s.parse()
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic unmasked corpus and its manifest.
    Synth {
        /// Dataset id written into the manifest [default: synthetic].
        #[arg(long)]
        dataset: Option<String>,
        /// Number of identities [default: 20].
        #[arg(long)]
        identities: Option<usize>,
        /// Images per identity [default: 4].
        #[arg(long)]
        images: Option<usize>,
        /// Square image side in pixels [default: 96].
        #[arg(long)]
        size: Option<u32>,
    },
    /// Synthesise masked counterparts of every unmasked image.
    Mask {
        /// Manifest of unmasked images.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Split identities into train, validation and holdout.
    Split {
        /// Merged manifest to split.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Fraction of identities for training.
        #[arg(long)]
        train: Option<f64>,
        /// Fraction of identities for validation; the rest are holdout.
        #[arg(long)]
        validation: Option<f64>,
    },
    /// Generate label-balanced benchmark pair lists.
    Pairs {
        /// Merged manifest; one list is written per dataset.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Split file restricting the identities to one role.
        #[arg(long)]
        splits: Option<PathBuf>,
        /// Role used with --splits [default: holdout].
        #[arg(long, value_parser = parse_role)]
        role: Option<Role>,
        /// Pairs per list, half authentic [default: 1000].
        #[arg(long)]
        count: Option<usize>,
    },
    /// Contrastive pretraining of a representation.
    Pretrain,
    /// Supervised Siamese finetuning.
    Finetune,
    /// Train on one dataset, report EER on every holdout per model.
    Benchmark1,
    /// Multi-dataset CP/FT runs, ensemble, EER and FRR100 reports.
    Benchmark2,
    /// Score a pair list with one or more checkpoints.
    Evaluate {
        /// Verifier checkpoint; repeat for several models or an ensemble.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Pair list to score.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Manifest resolving the pair list's image ids; repeatable.
        #[arg(long = "manifest")]
        manifests: Vec<PathBuf>,
    },
}

fn parse_role(s: &str) -> Result<Role, String> {
    s.parse()
}

fn absolute(p: PathBuf) -> PathBuf {
    std::path::absolute(&p).unwrap_or(p)
}

fn missing(command: &str, section: &str, flags: &str) -> CliError {
    CliError::usage(format!("{command} needs a [{section}] config section or {flags}"))
}

/// Folds command-line flags into the config; the result is what gets frozen.
fn resolve(cli: Cli) -> CliResult<(RunConfig, Command, Option<usize>)> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| CliError { kind: error::Kind::Usage, error: e })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.paths.run_dir = Some(absolute(out));
    }
    match &cli.command {
        Command::Synth { dataset, identities, images, size } => {
            let s = config.synth.get_or_insert(SynthSection {
                dataset: "synthetic".into(),
                identities: 20,
                images_per_identity: 4,
                size: 96,
            });
            if let Some(v) = dataset {
                s.dataset = v.clone();
            }
            if let Some(v) = identities {
                s.identities = *v;
            }
            if let Some(v) = images {
                s.images_per_identity = *v;
            }
            if let Some(v) = size {
                s.size = *v;
            }
        }
        Command::Mask { manifest } => {
            if let Some(m) = manifest {
                let params = config.mask.take().map(|s| s.params).unwrap_or_default();
                config.mask = Some(MaskSection { manifest: absolute(m.clone()), params });
            }
            if config.mask.is_none() {
                return Err(missing("mask", "mask", "--manifest"));
            }
        }
        Command::Split { manifest, train, validation } => {
            if let Some(m) = manifest {
                let fractions = config.split.take().map_or(maskmatch_core::registry::DEFAULT_SPLIT_FRACTIONS, |s| s.fractions);
                config.split = Some(SplitSection { manifest: absolute(m.clone()), fractions });
            }
            let s = config.split.as_mut().ok_or_else(|| missing("split", "split", "--manifest"))?;
            if let Some(t) = train {
                s.fractions.0 = *t;
            }
            if let Some(v) = validation {
                s.fractions.1 = *v;
            }
        }
        Command::Pairs { manifest, splits, role, count } => {
            if let Some(m) = manifest {
                let old = config.pairs.take();
                config.pairs = Some(PairsSection {
                    manifest: absolute(m.clone()),
                    splits: old.as_ref().and_then(|s| s.splits.clone()),
                    role: old.as_ref().map_or(Role::Holdout, |s| s.role),
                    count: old.as_ref().map_or(1000, |s| s.count),
                });
            }
            let s = config.pairs.as_mut().ok_or_else(|| missing("pairs", "pairs", "--manifest"))?;
            if let Some(p) = splits {
                s.splits = Some(absolute(p.clone()));
            }
            if let Some(r) = role {
                s.role = *r;
            }
            if let Some(c) = count {
                s.count = *c;
            }
        }
        Command::Pretrain => {
            let s = config.pretrain.as_mut().ok_or_else(|| missing("pretrain", "pretrain", "a config"))?;
            s.params.seed = derive_seed(config.seed, "pretrain");
        }
        Command::Finetune => {
            let s = config.finetune.as_mut().ok_or_else(|| missing("finetune", "finetune", "a config"))?;
            s.run.0.seed = derive_seed(config.seed, &format!("finetune/{}", s.run.0.name));
        }
        Command::Benchmark1 => {
            let s = config.benchmark1.as_mut().ok_or_else(|| missing("benchmark1", "benchmark1", "a config"))?;
            s.run.0.seed = derive_seed(config.seed, "benchmark1");
            if let Some(t) = cli.tap {
                s.tap = t;
            }
        }
        Command::Benchmark2 => {
            let s = config.benchmark2.as_mut().ok_or_else(|| missing("benchmark2", "benchmark2", "a config"))?;
            for r in &mut s.runs {
                r.0.seed = derive_seed(config.seed, &format!("finetune/{}", r.0.name));
            }
            if let Some(p) = &mut s.pretrain {
                p.seed = derive_seed(config.seed, "pretrain");
            }
            if let Some(t) = cli.tap {
                s.tap = t;
            }
        }
        Command::Evaluate { checkpoints, pairs, manifests } => {
            let s = match (config.evaluate.take(), pairs) {
                (Some(mut s), p) => {
                    if let Some(p) = p {
                        s.pairs = absolute(p.clone());
                    }
                    s
                }
                (None, Some(p)) => EvaluateSection {
                    checkpoints: Vec::new(),
                    pairs: absolute(p.clone()),
                    manifests: Vec::new(),
                    tap: Tap::Bottleneck,
                    ensemble: false,
                },
                (None, None) => return Err(missing("evaluate", "evaluate", "--pairs")),
            };
            let mut s = s;
            if !checkpoints.is_empty() {
                s.checkpoints = checkpoints.iter().cloned().map(absolute).collect();
            }
            if !manifests.is_empty() {
                s.manifests = manifests.iter().cloned().map(absolute).collect();
            }
            if let Some(t) = cli.tap {
                s.tap = t;
            }
            s.ensemble |= cli.ensemble;
            config.evaluate = Some(s);
        }
    }
    Ok((config, cli.command, cli.workers))
}

fn section<T>(s: Option<&T>) -> &T {
    s.expect("resolve checked the section")
}

fn run(cli: Cli) -> CliResult<()> {
    let (config, command, workers) = resolve(cli)?;
    let run_dir = config
        .paths
        .run_dir
        .clone()
        .ok_or_else(|| CliError::usage("no run directory: pass --out or set paths.run_dir"))?;
    let ctx = Ctx {
        seed: config.seed,
        data_root: config.paths.data_root.clone(),
        workers,
        run: RunDir::open(Path::new(&run_dir), &config.to_toml())?,
    };
    match command {
        Command::Synth { .. } => commands::synth(&ctx, section(config.synth.as_ref())),
        Command::Mask { .. } => commands::mask(&ctx, section(config.mask.as_ref())),
        Command::Split { .. } => commands::split(&ctx, section(config.split.as_ref())),
        Command::Pairs { .. } => commands::pairs(&ctx, section(config.pairs.as_ref())),
        Command::Pretrain => commands::pretrain(&ctx, section(config.pretrain.as_ref())),
        Command::Finetune => commands::finetune_cmd(&ctx, section(config.finetune.as_ref())),
        Command::Benchmark1 => commands::benchmark1(&ctx, section(config.benchmark1.as_ref())),
        Command::Benchmark2 => commands::benchmark2(&ctx, section(config.benchmark2.as_ref())),
        Command::Evaluate { .. } => commands::evaluate_cmd(&ctx, section(config.evaluate.as_ref())),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(error::Kind::Usage as u8) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
