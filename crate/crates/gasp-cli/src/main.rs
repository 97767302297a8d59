//! Command-line driver: dataset generation, training, evaluation, gradient
//! checking, and ablation sweeps over one shared configuration tree.
//!
//! Flag values override configuration-file values, which override built-in
//! defaults. Every command is deterministic given the seed. Exit codes:
//! 0 success, 2 validation failure, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gasp_cli::config::{load_run_config, parse_head_layers, RunConfig};
use gasp_cli::errors::CliError;
use gasp_cli::gradcheck::{self, LossTarget};
use gasp_cli::{ablate, datagen, eval_cmd, train_cmd};
use gasp_core::trainer::TrainError;

#[derive(Parser)]
#[command(name = "gasp", version, about = "Geometry-supervised toy transformer workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file; unset fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DatagenArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    num_train: Option<usize>,
    #[arg(long)]
    num_test: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory produced by `datagen`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory for checkpoints and the step log.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Correspondence-head layers, e.g. `2-4` or `1,3`.
    #[arg(long)]
    head_layers: Option<String>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long)]
    lora_rank: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory for the report and curve tables.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to probe; defaults to the final training checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Probe freshly initialized weights instead of a checkpoint.
    #[arg(long)]
    untrained: bool,
    #[arg(long)]
    head_layers: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Restrict the check to one loss: corr, depth, lm, or total.
    #[arg(long)]
    loss: Option<String>,
    /// Corrupt one gradient before checking; the run must then fail.
    #[arg(long, hide = true)]
    sabotage: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Which knob to sweep: lora-rank or head-layers.
    #[arg(long)]
    axis: String,
    /// Axis values: ranks comma-separated, layer lists semicolon-separated.
    #[arg(long)]
    values: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset with its manifest.
    Datagen(DatagenArgs),
    /// Train the model on a generated dataset.
    Train(TrainArgs),
    /// Probe correspondence quality of a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Sweep one configuration axis and tabulate the results.
    Ablate(AblateArgs),
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = load_run_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_model_flags(
    cfg: &mut RunConfig,
    head_layers: Option<&str>,
    lora_rank: Option<usize>,
) -> Result<(), CliError> {
    if let Some(spec) = head_layers {
        cfg.model.head_layers = parse_head_layers(spec)?;
    }
    if let Some(rank) = lora_rank {
        cfg.model.lora_rank = rank;
    }
    Ok(())
}

fn run_datagen(args: &DatagenArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.common)?;
    if let Some(n) = args.num_train {
        cfg.dataset.num_train = n;
    }
    if let Some(n) = args.num_test {
        cfg.dataset.num_test = n;
    }
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.dataset_dir));
    let manifest = datagen::run(&cfg, &out)?;
    println!(
        "wrote {} sequences ({} train, {} test) to {}",
        manifest.num_sequences,
        cfg.dataset.num_train,
        cfg.dataset.num_test,
        out.display()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(l) = args.lambda_c {
        cfg.loss.lambda_c = l;
    }
    if let Some(l) = args.lambda_d {
        cfg.loss.lambda_d = l;
    }
    apply_model_flags(&mut cfg, args.head_layers.as_deref(), args.lora_rank)?;
    let dataset = args.dataset.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.dataset_dir));
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.checkpoint_dir));
    let outcome = train_cmd::run(&cfg, &dataset, &out)?;
    if let Some(last) = outcome.summary.records.last() {
        println!("finished {} steps: L_total {:.4}", outcome.summary.total_steps, last.l_total);
    }
    let last_geo = outcome
        .summary
        .records
        .iter()
        .rev()
        .find(|r| r.kind == gasp_core::trainer::StepKind::Geometric);
    if let Some(geo) = last_geo {
        println!(
            "last geometric step: L_LM {:.4}, L_corr {:.4}, L_depth {:.4}",
            geo.l_lm, geo.l_corr, geo.l_depth
        );
    }
    println!("step log: {}", outcome.log_path.display());
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.common)?;
    apply_model_flags(&mut cfg, args.head_layers.as_deref(), None)?;
    let dataset = args.dataset.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.dataset_dir));
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.report_dir));
    let checkpoint = args.checkpoint.clone().unwrap_or_else(|| {
        PathBuf::from(&cfg.paths.checkpoint_dir).join(train_cmd::FINAL_CKPT_NAME)
    });
    let outcome = eval_cmd::run(&cfg, Some(&checkpoint), &dataset, &out, args.untrained)?;
    eval_cmd::print_summary(&outcome.report);
    println!("report directory: {}", out.display());
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    let targets: Vec<LossTarget> = match args.loss.as_deref() {
        Some(spec) => vec![LossTarget::parse(spec)?],
        None => LossTarget::ALL.to_vec(),
    };
    let outcome = gradcheck::run(cfg.seed, &cfg.loss, &targets, args.sabotage)?;
    gradcheck::print_summary(&outcome);
    gradcheck::ensure_passed(&outcome)
}

fn run_ablate(args: &AblateArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    let axis = ablate::AblationAxis::parse(&args.axis)?;
    let settings = ablate::parse_settings(axis, &args.values)?;
    let dataset = args.dataset.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.dataset_dir));
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.paths.report_dir));
    let outcome = ablate::run(&cfg, &dataset, &out, &settings)?;
    ablate::print_summary(&outcome.rows);
    println!("table: {}", outcome.csv_path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Datagen(args) => run_datagen(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Gradcheck(args) => run_gradcheck(args),
        Command::Ablate(args) => run_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if let CliError::Train(TrainError::Diverged { last_checkpoint, .. }) = &err {
                match last_checkpoint {
                    Some(path) => eprintln!("last checkpoint: {path}"),
                    None => eprintln!("no checkpoint was written before divergence"),
                }
            }
            ExitCode::from(err.exit_code())
        }
    }
}
