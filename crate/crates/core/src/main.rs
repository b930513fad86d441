use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use longtail::cli::{self, ExperimentConfig, SchemeChoice};
use longtail::dataset::{CountMode, DatasetSpec, Profile};
use longtail::margins::VariantKind;
use longtail::training::TrainPlan;

/// Margin-adjustment experiments for long-tailed classification.
#[derive(Parser)]
#[command(name = "longtail", version, about)]
struct Cli {
    /// Experiment config (JSON) driving seed sweeps.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the seed of the generated dataset or training plan.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Count source for weights built from scheme/loss specs.
    #[arg(long, global = true, default_value = "image")]
    source: String,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write train.csv, test.csv and freq.json for a synthetic dataset.
    Generate(GenerateArgs),
    /// Train a plan against a generated data directory.
    Train(TrainArgs),
    /// Score a checkpoint and write an evaluation report.
    Eval(EvalArgs),
    /// Evaluate several schemes side by side on one checkpoint.
    Compare(CompareArgs),
    /// Run the detection false-positive comparison scenario.
    Detproxy(DetproxyArgs),
    /// Aggregate evaluation reports into a mean/std summary table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory (created if missing).
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 10)]
    dim: usize,
    #[arg(long, default_value_t = 100.0)]
    beta: f64,
    /// exponential | pareto | explicit:,-separated counts
    #[arg(long, default_value = "exponential")]
    profile: String,
    #[arg(long, default_value_t = 500)]
    n_max: u64,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, default_value_t = 200)]
    test_per_class: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training plan as JSON.
    #[arg(long, conflicts_with = "preset")]
    plan: Option<PathBuf>,
    /// Built-in plan: baseline | posthoc | iif-e2e | decoupled.
    #[arg(long)]
    preset: Option<String>,
    /// Weight variant for preset plans.
    #[arg(long, default_value = "smooth")]
    variant: String,
    /// Directory holding train.csv / test.csv / freq.json.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long, default_value = "model.ckpt.json")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Scheme spec; omit to use the scheme recorded in the checkpoint.
    #[arg(long)]
    scheme: Option<String>,
    /// Group split thresholds as few_max,many_min (default: terciles).
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Comma-separated scheme specs; the first is the baseline.
    #[arg(long, default_value = "none,mult:smooth")]
    schemes: String,
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long, default_value = "comparison.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct DetproxyArgs {
    /// Comma-separated schemes, e.g. additive,multiplicative.
    #[arg(long, default_value = "additive,multiplicative")]
    schemes: String,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value = "detproxy_out")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation report JSON files.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "summary.csv")]
    out: PathBuf,
}

fn parse_thresholds(spec: &Option<String>) -> anyhow::Result<Option<(u64, u64)>> {
    match spec {
        None => Ok(None),
        Some(s) => {
            let (a, b) = s
                .split_once(',')
                .context("thresholds must be few_max,many_min")?;
            Ok(Some((a.trim().parse()?, b.trim().parse()?)))
        }
    }
}

fn dataset_spec_from(args: &GenerateArgs, seed: u64) -> anyhow::Result<DatasetSpec> {
    let profile = match args.profile.as_str() {
        "exponential" => Profile::Exponential { n_max: args.n_max },
        "pareto" => Profile::Pareto { n_max: args.n_max },
        other => match other.strip_prefix("explicit:") {
            Some(list) => {
                let counts = list
                    .split(',')
                    .map(|t| t.trim().parse::<u64>())
                    .collect::<Result<Vec<_>, _>>()
                    .context("explicit profile needs comma-separated counts")?;
                Profile::Explicit { counts }
            }
            None => anyhow::bail!("unknown profile '{other}'"),
        },
    };
    Ok(DatasetSpec {
        num_classes: args.classes,
        dim: args.dim,
        imbalance_factor: args.beta,
        profile,
        class_separation: args.separation,
        test_per_class: args.test_per_class,
        seed,
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = cli
        .config
        .as_ref()
        .map(ExperimentConfig::load_json)
        .transpose()
        .context("loading experiment config")?;
    let source = CountMode::parse(&cli.source)?;

    match cli.cmd {
        Cmd::Generate(args) => {
            if let Some(cfg) = &config {
                cli::sweep_generate(cfg, &args.out)?;
            } else {
                let spec = dataset_spec_from(&args, cli.seed.unwrap_or(0))?;
                cli::cmd_generate(&spec, &args.out)?;
            }
        }
        Cmd::Train(args) => {
            if let Some(cfg) = &config {
                cli::sweep_train(cfg, &args.data, args.out.parent().unwrap_or(&args.out))?;
            } else {
                let plan: TrainPlan = match (&args.plan, &args.preset) {
                    (Some(path), None) => {
                        let mut plan = TrainPlan::load_json(path)?;
                        if let Some(seed) = cli.seed {
                            plan.seed = seed;
                        }
                        plan
                    }
                    (None, Some(name)) => {
                        let data = cli::load_data_dir(&args.data)?;
                        cli::preset_plan(
                            name,
                            VariantKind::parse(&args.variant)?,
                            &data.table,
                            cli.seed.unwrap_or(0),
                        )?
                    }
                    _ => anyhow::bail!("pass exactly one of --plan or --preset"),
                };
                cli::cmd_train(&plan, &args.data, &args.out)?;
            }
        }
        Cmd::Eval(args) => {
            let choice = match &args.scheme {
                Some(spec) => SchemeChoice::Spec(spec.clone()),
                None => SchemeChoice::FromCheckpoint,
            };
            let thresholds = parse_thresholds(&args.thresholds)?;
            cli::cmd_eval(&args.ckpt, &args.data, &choice, source, thresholds, &args.out)?;
        }
        Cmd::Compare(args) => {
            let schemes: Vec<String> =
                args.schemes.split(',').map(|s| s.trim().to_string()).collect();
            let thresholds = parse_thresholds(&args.thresholds)?;
            cli::cmd_compare(&args.ckpt, &args.data, &schemes, source, thresholds, &args.out)?;
        }
        Cmd::Detproxy(args) => {
            let schemes: Vec<String> =
                args.schemes.split(',').map(|s| s.trim().to_string()).collect();
            cli::cmd_detproxy(&schemes, args.threshold, &args.out)?;
        }
        Cmd::Report(args) => {
            cli::cmd_report(&args.inputs, &args.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
