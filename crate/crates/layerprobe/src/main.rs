//! Command-line interface: extraction, control-task synthesis, probe
//! training/evaluation, full sweeps, and report/plot regeneration.
//!
//! Exit codes: 0 success, 1 cell failures, 2 invalid config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use layerprobe::corpus::{load_token_corpus, ConllOptions, Scope, Split};
use layerprobe::extraction::RepresentationCache;
use layerprobe::metrics::TaskType;
use layerprobe::pipeline::run::ExtractionFilter;
use layerprobe::pipeline::{self, ExperimentConfig, PipelineError};
use layerprobe::probe::{ProbeData, TrainedProbe};
use layerprobe::{apply_control_mapping, build_control_mapping, evaluate_token_accuracy, train_probe};

#[derive(Parser)]
#[command(name = "layerprobe", version, about = "Layer-wise probing for masked language models")]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override for commands that take a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread count for sweeps and extraction.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Output override: directory or file depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize representation caches for the configured sweep.
    Extract(ExtractArgs),
    /// Control-task utilities.
    Control {
        #[command(subcommand)]
        command: ControlCommand,
    },
    /// Probe training and evaluation against a cache directory.
    Probe {
        #[command(subcommand)]
        command: ProbeCommand,
    },
    /// Run the full configured sweep: extraction, probes, reports, plots.
    Run,
    /// Rebuild reports and the aggregate table from completed cells.
    Report,
    /// Rebuild plots from completed cells.
    Plot,
}

#[derive(Args)]
struct ExtractArgs {
    /// Restrict to one model id.
    #[arg(long)]
    model: Option<String>,
    /// Restrict to one language.
    #[arg(long)]
    language: Option<String>,
    /// Restrict to one task (pos, ner, ntc).
    #[arg(long)]
    task: Option<String>,
}

#[derive(Subcommand)]
enum ControlCommand {
    /// Build a seeded control mapping for a token-level corpus and write it
    /// as TSV; optionally emit the relabeled corpus.
    Synth {
        /// CoNLL file or split directory.
        #[arg(long)]
        input: PathBuf,
        /// Distribution scope: full_dataset or train_only.
        #[arg(long, default_value = "full_dataset")]
        scope: String,
        /// Also write the relabeled corpus (CoNLL, one file per split) here.
        #[arg(long)]
        emit_corpus: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ProbeCommand {
    /// Train a probe on one layer of a cache directory.
    Train {
        /// Cache directory produced by `extract`.
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        layer: usize,
    },
    /// Evaluate a saved probe on one layer of a cache directory.
    Eval {
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        layer: usize,
        /// Split to evaluate: train, validation, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                PipelineError::InvalidConfig { .. } | PipelineError::ConfigFile { .. } => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>) -> Result<ExperimentConfig, PipelineError> {
    let path = cli_config.clone().ok_or_else(|| PipelineError::ConfigFile {
        path: "<missing>".to_string(),
        message: "this command needs --config <path>".to_string(),
    })?;
    ExperimentConfig::load(path)
}

fn dispatch(cli: Cli) -> Result<ExitCode, PipelineError> {
    match cli.command {
        Command::Extract(args) => {
            let config = load_config(&cli.config)?;
            let filter = ExtractionFilter {
                model: args.model,
                language: args.language,
                task: match args.task.as_deref() {
                    None => None,
                    Some(name) => Some(TaskType::parse(name).ok_or_else(|| {
                        PipelineError::ConfigFile {
                            path: name.to_string(),
                            message: "unknown task (expected pos, ner, or ntc)".to_string(),
                        }
                    })?),
                },
            };
            let dirs = pipeline::run::run_extractions(&config, cli.workers, &filter)?;
            for dir in dirs {
                println!("{}", dir.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Control { command } => match command {
            ControlCommand::Synth {
                input,
                scope,
                emit_corpus,
            } => {
                let scope = Scope::parse(&scope).ok_or_else(|| PipelineError::ConfigFile {
                    path: scope.clone(),
                    message: "unknown scope (expected full_dataset or train_only)".to_string(),
                })?;
                let seed = cli.seed.unwrap_or(0);
                let corpus = load_token_corpus(&input, ConllOptions::default())?;
                let mapping = build_control_mapping(&corpus, seed, scope)?;
                let out = cli.out.unwrap_or_else(|| PathBuf::from("mapping.tsv"));
                mapping.save_tsv(&out)?;
                println!("{}", out.display());
                if let Some(dir) = emit_corpus {
                    let relabeled = apply_control_mapping(&corpus, &mapping)?;
                    layerprobe::save_token_corpus(&relabeled, &dir)?;
                    println!("{}", dir.display());
                }
                Ok(ExitCode::SUCCESS)
            }
        },
        Command::Probe { command } => match command {
            ProbeCommand::Train { cache, layer } => {
                let config = load_config(&cli.config).ok();
                let cache = RepresentationCache::read_from_dir(&cache)?;
                let train = probe_data(&cache, layer, Split::Train)?;
                let validation = probe_data(&cache, layer, Split::Validation)?;
                let settings = config.map(|c| c.probe).unwrap_or_default();
                let probe_config = settings.probe_config(
                    train.dim(),
                    cache.manifest.tagset.len(),
                    cli.seed.unwrap_or(0),
                );
                let probe = train_probe(&train, &validation, &probe_config)?;
                let out = cli.out.unwrap_or_else(|| PathBuf::from("probe.bin"));
                probe.save(&out)?;
                let stats = &probe.training_log[probe.selected_epoch];
                println!(
                    "{} (selected epoch {}, validation accuracy {:.4})",
                    out.display(),
                    probe.selected_epoch,
                    stats.validation_accuracy
                );
                Ok(ExitCode::SUCCESS)
            }
            ProbeCommand::Eval {
                probe,
                cache,
                layer,
                split,
            } => {
                let split = Split::parse(&split).ok_or_else(|| PipelineError::ConfigFile {
                    path: split.clone(),
                    message: "unknown split (expected train, validation, or test)".to_string(),
                })?;
                let cache = RepresentationCache::read_from_dir(&cache)?;
                let data = probe_data(&cache, layer, split)?;
                let probe = TrainedProbe::load(&probe)?;
                let accuracy = evaluate_token_accuracy(&probe, &data)?;
                println!("accuracy {accuracy:.6} over {} items", data.len());
                Ok(ExitCode::SUCCESS)
            }
        },
        Command::Run => {
            let config = load_config(&cli.config)?;
            let mut ledger = pipeline::plan(&config)?;
            let outcome = pipeline::run(&config, &mut ledger, cli.workers)?;
            for path in outcome
                .report_paths
                .iter()
                .chain(&outcome.aggregate_paths)
                .chain(&outcome.plot_paths)
            {
                println!("{}", path.display());
            }
            if outcome.all_succeeded() {
                Ok(ExitCode::SUCCESS)
            } else {
                for cell in &outcome.failed {
                    eprintln!("failed: {cell}");
                }
                Ok(ExitCode::from(1))
            }
        }
        Command::Report | Command::Plot => {
            // Both rebuild from fragments; run() reuses every cached cell, so
            // this is cheap when the sweep is complete.
            let config = load_config(&cli.config)?;
            let mut ledger = pipeline::plan(&config)?;
            let outcome = pipeline::run(&config, &mut ledger, cli.workers)?;
            for path in outcome.aggregate_paths.iter().chain(&outcome.plot_paths) {
                println!("{}", path.display());
            }
            Ok(if outcome.all_succeeded() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

fn probe_data(
    cache: &RepresentationCache,
    layer: usize,
    split: Split,
) -> Result<ProbeData, PipelineError> {
    let entry = cache.entry(layer, split).ok_or_else(|| {
        PipelineError::ConfigFile {
            path: format!("layer {layer}, split {split}"),
            message: "cache has no such entry".to_string(),
        }
    })?;
    let features = ndarray::Array2::from_shape_vec(
        (entry.len(), entry.width),
        entry.data.iter().map(|&v| v as f64).collect(),
    )
    .expect("entry validated");
    let labels: Vec<usize> = entry.labels.iter().map(|&l| l as usize).collect();
    Ok(ProbeData::new(features, labels)?)
}
