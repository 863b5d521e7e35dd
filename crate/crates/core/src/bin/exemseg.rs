//! Command-line front end for the exemplar-guided segmentation pipeline.
//!
//! Exit codes: 0 on success, 2 for configuration/usage errors, 3 for a
//! pipeline stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use exemseg::data_io::{generate_phantom_dataset, load_manifest, load_record_slice, PhantomConfig};
use exemseg::error::{Error, Result};
use exemseg::evaluation::{evaluate, write_report, PromptStrategy};
use exemseg::exemplar_selection::{select_most_organs, select_random_fraction, ExemplarSet};
use exemseg::experiment::{compare_runs, run_experiment, ExperimentConfig};
use exemseg::model::{Model, ModelConfig};
use exemseg::synthesis::{build_dataset, collect_backgrounds, SynthesisConfig};
use exemseg::training::{train, TrainConfig};

type S = exemseg::EvalScalar;

#[derive(Parser)]
#[command(name = "exemseg", version, about = "Few-exemplar promptable segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom(PhantomArgs),
    /// Select exemplar slices from a dataset.
    Select(SelectArgs),
    /// Synthesize a training set from exemplars and background slices.
    Synthesize(SynthArgs),
    /// Fine-tune a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a trained model checkpoint.
    Eval(EvalArgs),
    /// Run a full experiment from a JSON config.
    Run(RunArgs),
    /// Compare finished experiment runs.
    Compare(CompareArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Phantom config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(ValueEnum, Clone, Copy)]
enum StrategyArg {
    RandomFraction,
    MostOrgans,
}

#[derive(Args)]
struct SelectArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    /// Fraction of the eligible pool (random-fraction).
    #[arg(long)]
    fraction: Option<f64>,
    /// Minimum foreground pixels for eligibility (random-fraction).
    #[arg(long, default_value_t = 1)]
    min_fg_pixels: u64,
    /// Total exemplars (most-organs).
    #[arg(long)]
    total: Option<usize>,
    /// Exemplars per volume (most-organs).
    #[arg(long)]
    quota: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output exemplar set JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Source dataset directory containing manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// Exemplar set JSON produced by `select`.
    #[arg(long)]
    exemplars: PathBuf,
    /// Synthesis config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset directory containing manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// Model config JSON; defaults apply when omitted.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Train config JSON; defaults apply when omitted.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Model initialization seed.
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy)]
enum PromptArg {
    Interior,
    Random,
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluation dataset directory containing manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "interior")]
    prompt: PromptArg,
    /// Seed for random prompt placement.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Two or more finished run directories.
    #[arg(required = true, num_args = 2..)]
    runs: Vec<PathBuf>,
}

fn read_json_or_default<C: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> Result<C> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("bad config {}: {e}", p.display())))
        }
        None => Ok(C::default()),
    }
}

fn load_all_slices(data: &std::path::Path) -> Result<Vec<exemseg::Slice64>> {
    let manifest = load_manifest(&data.join("manifest.json"))?;
    manifest
        .records
        .iter()
        .map(|r| load_record_slice::<S>(data, &manifest, r))
        .collect()
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(args) => {
            let cfg: PhantomConfig = read_json_or_default(&args.config)?;
            let manifest = generate_phantom_dataset::<S>(&cfg, args.seed, &args.out)?;
            println!(
                "wrote {} slices ({} volumes) to {}",
                manifest.records.len(),
                manifest.volume_ids().len(),
                args.out.display()
            );
        }
        Command::Select(args) => {
            let manifest = load_manifest(&args.data.join("manifest.json"))?;
            let set = match args.strategy {
                StrategyArg::RandomFraction => {
                    let fraction = args.fraction.ok_or_else(|| {
                        Error::Config("--fraction is required for random-fraction".into())
                    })?;
                    select_random_fraction(&manifest, fraction, args.min_fg_pixels, args.seed)?
                }
                StrategyArg::MostOrgans => {
                    let total = args.total.ok_or_else(|| {
                        Error::Config("--total is required for most-organs".into())
                    })?;
                    let quota = args.quota.ok_or_else(|| {
                        Error::Config("--quota is required for most-organs".into())
                    })?;
                    select_most_organs(&manifest, total, quota, args.seed)?
                }
            };
            set.save(&args.out)?;
            println!("selected {} exemplars -> {}", set.entries.len(), args.out.display());
        }
        Command::Synthesize(args) => {
            let manifest = load_manifest(&args.data.join("manifest.json"))?;
            let cfg: SynthesisConfig = read_json_or_default(&args.config)?;
            let set = ExemplarSet::load(&args.exemplars)?;
            let exemplars: Vec<exemseg::Slice64> = manifest
                .records
                .iter()
                .filter(|r| {
                    set.entries
                        .iter()
                        .any(|e| e.volume_id == r.volume_id && e.slice_index == r.slice_index)
                })
                .map(|r| load_record_slice::<S>(&args.data, &manifest, r))
                .collect::<Result<_>>()?;
            let backgrounds = collect_backgrounds::<S>(&manifest, &args.data)?;
            let out_manifest = build_dataset(
                &exemplars,
                &backgrounds,
                &cfg,
                manifest.class_count,
                &args.out,
            )
            .map_err(|e| e.in_stage("synthesize"))?;
            println!(
                "synthesized {} slices -> {}",
                out_manifest.records.len(),
                args.out.display()
            );
        }
        Command::Train(args) => {
            let model_cfg: ModelConfig = read_json_or_default(&args.model_config)?;
            let train_cfg: TrainConfig = read_json_or_default(&args.train_config)?;
            let slices = load_all_slices(&args.data)?;
            let mut model = Model::<S>::new(model_cfg, args.init_seed)?;
            let report = train(&mut model, &slices, &train_cfg, Some(&args.out))
                .map_err(|e| match e {
                    e @ Error::Stage { .. } => e,
                    e => e.in_stage("train"),
                })?;
            println!(
                "trained {} steps, final loss {:.4} -> {}",
                report.steps_run,
                report.final_loss,
                args.out.display()
            );
        }
        Command::Eval(args) => {
            let model = Model::<S>::load(&args.model)?;
            let slices = load_all_slices(&args.data)?;
            let strategy = match args.prompt {
                PromptArg::Interior => PromptStrategy::Interior,
                PromptArg::Random => PromptStrategy::Random { seed: args.seed },
            };
            let report =
                evaluate(&model, &slices, strategy).map_err(|e| e.in_stage("eval"))?;
            write_report(&report, &args.out)?;
            println!(
                "evaluated {} cases: mean DSC {:.4}, mean HD95 {} -> {}",
                report.num_cases,
                report.mean_dsc,
                report
                    .mean_hd95
                    .map_or("n/a".to_string(), |v| format!("{v:.4}")),
                args.out.display()
            );
        }
        Command::Run(args) => {
            let cfg = ExperimentConfig::load(&args.config)?;
            let summary = run_experiment::<S>(&cfg)?;
            println!(
                "run '{}' complete: mean DSC {:.4} -> {}",
                summary.name,
                summary.mean_dsc,
                summary.out_dir.display()
            );
        }
        Command::Compare(args) => {
            let table = compare_runs(&args.runs)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
