use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sharpeuler::calibration::{calibrate_from_trace, run_reference_trajectories, ShapeParams, VelocityTrace};
use sharpeuler::datasets::{read_points_csv, sample, sample_base, write_points_csv, Dataset, DatasetSpec};
use sharpeuler::harness::{
    export_profile_plot_data, gamma_ablation, load_field, run_experiment, train_model, ExperimentConfig,
    RUN_ROOT_ENV,
};
use sharpeuler::metrics::{evaluate, SinkhornConfig, SinkhornMode};
use sharpeuler::sampler::euler_sample;
use sharpeuler::schedule::{export_schedule, ScheduleSpec};
use sharpeuler::theory::verify_all;
use sharpeuler::tinyflow::{train, Checkpoint, TrainConfig};
use sharpeuler::Grid;

/// Sharpness-calibrated Euler schedules for flow-matching samplers.
#[derive(Parser)]
#[command(name = "sharpeuler", version)]
struct Cli {
    /// Directory holding `<config-hash>/` run folders.
    #[arg(long, global = true, env = RUN_ROOT_ENV, default_value = "runs")]
    run_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the velocity MLP, either for an experiment config or standalone.
    Train(TrainArgs),
    /// Calibrate a sharpness profile from reference trajectories.
    Calibrate(CalibrateArgs),
    /// Draw samples with a fixed-budget Euler schedule.
    Sample(SampleArgs),
    /// Density, Coverage and entropic W2² between two point clouds.
    Metrics(MetricsArgs),
    /// Method × budget result table for an experiment config.
    Experiment(ConfigArg),
    /// γ × budget Density/Coverage sweep for an experiment config.
    AblateGamma(ConfigArg),
    /// Risk-functional property checks.
    Theory {
        #[command(subcommand)]
        command: TheoryCommand,
    },
    /// Synthetic dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Schedule utilities.
    Schedule {
        #[command(subcommand)]
        command: ScheduleCommand,
    },
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config; the checkpoint goes to its run directory.
    #[arg(long, conflicts_with_all = ["dataset", "out"])]
    config: Option<PathBuf>,
    #[arg(long, requires = "out")]
    dataset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Checkpoint path or `analytic:SPEC`.
    #[arg(long, required_unless_present = "from_trace")]
    model: Option<String>,
    /// Reuse a saved velocity trace instead of integrating.
    #[arg(long, conflicts_with = "model")]
    from_trace: Option<PathBuf>,
    /// Also save the velocity trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    grid_n: usize,
    #[arg(long, default_value_t = 256)]
    trajectories: usize,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1e-8)]
    eps_a: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Write profile/knot CSVs for plotting into this directory.
    #[arg(long, requires = "budget")]
    plot_dir: Option<PathBuf>,
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: String,
    /// `uniform`, `shifted:ALPHA` or `sharp:PROFILE.json`.
    #[arg(long)]
    schedule: ScheduleSpec,
    #[arg(long)]
    budget: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    gen: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0.01)]
    eps: f64,
    /// Use pure log-sum-exp Sinkhorn updates.
    #[arg(long)]
    log_domain: bool,
    /// Recorded in the report.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TheoryCommand {
    /// Run every check against its brute-force oracle.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Write samples of a synthetic target as CSV.
    Dump {
        #[arg(long)]
        name: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ScheduleCommand {
    /// Write knots as JSON, or CSV when the file ends in `.csv`.
    Export {
        #[arg(long)]
        schedule: ScheduleSpec,
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(args: TrainArgs, root: &Path) -> Result<()> {
    if let Some(path) = args.config {
        let mut cfg = ExperimentConfig::load(&path)?;
        if args.steps.is_some() || args.seed.is_some() {
            bail!("--steps/--seed apply to standalone training; edit [train] in the config instead");
        }
        cfg.model.train = false;
        let (ckpt, report) = train_model(&cfg, root)?;
        println!("{}", ckpt.display());
        eprintln!(
            "held-out loss {:.5} -> {:.5}",
            report.initial_heldout_loss, report.final_heldout_loss
        );
        return Ok(());
    }
    let (Some(name), Some(out)) = (args.dataset, args.out) else {
        bail!("pass --config FILE, or --dataset NAME --out CKPT");
    };
    let dataset: Dataset = name.parse()?;
    let mut config = TrainConfig::default();
    if let Some(s) = args.steps {
        config.steps = s;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let outcome = train(&config, &dataset)?;
    Checkpoint {
        params: outcome.ema,
        train_config: Some(config),
        train_report: Some(outcome.report.clone()),
    }
    .save(&out)?;
    eprintln!(
        "held-out loss {:.5} -> {:.5}",
        outcome.report.initial_heldout_loss, outcome.report.final_heldout_loss
    );
    println!("{}", out.display());
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let params = ShapeParams {
        gamma: args.gamma,
        sigma: args.sigma,
        eps_a: args.eps_a,
    };
    let trace = match (&args.from_trace, &args.model) {
        (Some(path), _) => VelocityTrace::load(path)?,
        (None, Some(model)) => {
            let field = load_field(model)?;
            let grid = Grid::uniform(args.grid_n)?;
            run_reference_trajectories(field.as_ref(), &grid, args.trajectories, args.seed)?
        }
        (None, None) => bail!("pass --model or --from-trace"),
    };
    if let Some(path) = &args.trace {
        trace.save(path)?;
    }
    let profile = calibrate_from_trace(&trace, &params)?;
    profile.save(&args.out)?;
    if let (Some(dir), Some(b)) = (&args.plot_dir, args.budget) {
        export_profile_plot_data(&profile, b, dir)?;
    }
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let field = load_field(&args.model)?;
    let schedule = args.schedule.build(args.budget)?;
    let noise = sample_base(args.n, args.seed);
    let out = euler_sample(field.as_ref(), &schedule, noise.view())?;
    write_points_csv(&args.out, &out.samples)?;
    eprintln!("{} samples, NFE {}", args.n, out.nfe);
    Ok(())
}

fn cmd_metrics(args: MetricsArgs) -> Result<()> {
    let real = read_points_csv(&args.real)?;
    let gen = read_points_csv(&args.gen)?;
    let sinkhorn = SinkhornConfig {
        eps: args.eps,
        mode: if args.log_domain {
            SinkhornMode::LogDomain
        } else {
            SinkhornMode::Stabilized
        },
        ..Default::default()
    };
    let report = evaluate(real.view(), gen.view(), args.k, &sinkhorn, args.seed)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let root = cli.run_root;
    match cli.command {
        Command::Train(a) => cmd_train(a, &root)?,
        Command::Calibrate(a) => cmd_calibrate(a)?,
        Command::Sample(a) => cmd_sample(a)?,
        Command::Metrics(a) => cmd_metrics(a)?,
        Command::Experiment(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let out = run_experiment(&cfg, &root)?;
            print!("{}", out.table.to_csv()?);
            eprintln!("results in {}", out.run_dir.display());
        }
        Command::AblateGamma(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let out = gamma_ablation(&cfg, &root)?;
            print!("{}", out.curves.to_csv()?);
            eprintln!("results in {}", out.run_dir.display());
        }
        Command::Theory {
            command: TheoryCommand::Verify { seed },
        } => {
            let report = verify_all(seed)?;
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(report.all_passed());
        }
        Command::Dataset {
            command: DatasetCommand::Dump { name, n, seed, out },
        } => {
            let dataset: Dataset = name.parse()?;
            write_points_csv(&out, &sample(&DatasetSpec::new(dataset, seed), n)?)?;
        }
        Command::Schedule {
            command: ScheduleCommand::Export { schedule, budget, out },
        } => export_schedule(&schedule.build(budget)?, &out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
