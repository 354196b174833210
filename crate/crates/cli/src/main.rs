//! `lpx`: generate line-image datasets, train the classifiers, run the
//! exhaustive one-pixel attack and aggregate the results.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use lpx_core::attack::{AttackMode, WORKERS_ENV};
use lpx_core::cnn::{gradcheck_params, gradient_check};
use lpx_core::linegen::generate_dataset;
use lpx_core::sweep::{run_stages, run_sweep, ExperimentConfig, Stages, SweepReport, SweepStatus};
use lpx_core::{BitGrid, Error};

const EXIT_PARTIAL: u8 = 2;
const EXIT_INVALID_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "lpx", version, about = "One-pixel attack experiments on binary line images")]
struct Cli {
    /// Log more (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or verify) the datasets of every configuration.
    Generate(GridArgs),
    /// Train the models of every configuration, reusing finished ones.
    Train(GridArgs),
    /// Attack every trained model exhaustively.
    Attack(GridArgs),
    /// Aggregate existing attack records into the analysis files.
    Analyze(GridArgs),
    /// Run generate, train, attack and analyze end to end.
    Sweep(GridArgs),
    /// Check analytic gradients against central differences in f64.
    Gradcheck(GradArgs),
}

#[derive(Args, Clone, Default)]
struct GridArgs {
    /// JSON experiment configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Image sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    dim: Vec<usize>,
    /// Angle steps in degrees, comma separated.
    #[arg(long = "angle-step", value_delimiter = ',')]
    angle_step: Vec<f64>,
    /// Seed of the first model; model k uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    /// Models per configuration.
    #[arg(long)]
    models: Option<usize>,
    /// Attack path for every size: full or incremental_verified.
    #[arg(long)]
    mode: Option<String>,
    /// Output root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: LPX_WORKERS, else all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Training epoch budget.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Also attack sizes up to this with the other path and compare.
    #[arg(long)]
    cross_check_max_dim: Option<usize>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Pass threshold on the maximum relative error.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

fn resolve(args: &GridArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => lpx_core::fsutil::read_json(path)?,
        None => ExperimentConfig::default(),
    };
    if !args.dim.is_empty() {
        cfg.dims = args.dim.clone();
    }
    if !args.angle_step.is_empty() {
        cfg.angle_steps = args.angle_step.clone();
    }
    if let Some(s) = args.seed {
        cfg.base_seed = s;
    }
    if let Some(m) = args.models {
        cfg.models_per_config = m;
    }
    if let Some(m) = &args.mode {
        cfg.attack_mode = Some(m.parse::<AttackMode>()?);
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    if let Some(n) = args.max_epochs {
        cfg.train.max_epochs = Some(n);
    }
    if let Some(n) = args.cross_check_max_dim {
        cfg.cross_check_max_dim = n;
    }
    cfg.workers = match args.workers {
        Some(n) => Some(n),
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("{WORKERS_ENV}={v:?} is not a count")))?,
            ),
            Err(_) => cfg.workers,
        },
    };
    Ok(cfg)
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::InvalidConfig(_) | Error::InvalidPoint(_) | Error::Json { .. }
    )
}

fn print_report(report: &SweepReport, stages: Stages) {
    for c in &report.configs {
        print!("{:<14} N={:<6}", c.name, c.n_images);
        if stages != Stages::GENERATE {
            let conv = c.models.iter().filter(|m| m.converged).count();
            print!(" converged {conv}/{}", c.models.len());
        }
        if let Some(r) = c.overall_ratio {
            print!(" adv_ratio {r:.3e}");
        }
        if let Some(b) = c.boundary_share_6deg {
            print!(" near_boundary {:.1}%", 100.0 * b);
        }
        println!();
        for m in &c.models {
            if let Some(a) = &m.attack {
                let cross = match &a.cross_check {
                    Some(x) if x.identical => " (paths agree)",
                    Some(_) => " (PATHS DISAGREE)",
                    None => "",
                };
                println!(
                    "  {:<26} epochs {:<4} adversarial {}/{}{cross}",
                    m.model_id, m.epochs, a.adversarial_count, a.candidates_total
                );
            } else if stages != Stages::GENERATE {
                println!(
                    "  {:<26} epochs {:<4} accuracy {} converged {}",
                    m.model_id, m.epochs, m.final_accuracy, m.converged
                );
            }
        }
    }
    if let Some(r) = &report.redundancy {
        println!("redundancy vs adversarial ratio: Spearman {:.3}", r.spearman);
    }
    for f in &report.failures {
        eprintln!("FAILED {} {} {:?}: {}", f.stage, f.config, f.seed, f.error);
    }
}

fn run_grid(args: &GridArgs, stages: Stages, sweep: bool) -> anyhow::Result<ExitCode> {
    let cfg = match resolve(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("invalid configuration: {e}");
            return Ok(ExitCode::from(EXIT_INVALID_CONFIG));
        }
    };
    let result = if sweep {
        run_sweep(&cfg)
    } else {
        run_stages(&cfg, stages).map(|(r, _)| r)
    };
    let report = match result {
        Ok(r) => r,
        Err(e) if is_config_error(&e) => {
            eprintln!("invalid configuration: {e}");
            return Ok(ExitCode::from(EXIT_INVALID_CONFIG));
        }
        Err(e) => return Err(e).context("pipeline aborted"),
    };
    print_report(&report, stages);
    // generate-only runs never train, so convergence does not apply
    let status = match report.status {
        SweepStatus::NonConvergence if !stages.train && !stages.attack && !stages.analyze => SweepStatus::Success,
        s => s,
    };
    Ok(ExitCode::from(status.exit_code() as u8))
}

fn gradcheck(args: &GradArgs) -> anyhow::Result<ExitCode> {
    let ds = match generate_dataset(args.dim, 2.0) {
        Ok(ds) => ds,
        Err(e) => {
            eprintln!("invalid configuration: {e}");
            return Ok(ExitCode::from(EXIT_INVALID_CONFIG));
        }
    };
    // a few images from both classes spread over the dataset
    let picks: Vec<usize> = (0..4).map(|k| (2 * k + 1) * ds.len() / 8).collect();
    let images: Vec<&BitGrid> = picks.iter().map(|&i| &ds.images[i].bits).collect();
    let labels: Vec<u8> = picks.iter().map(|&i| ds.images[i].label).collect();
    let params = gradcheck_params(args.dim, args.seed)?;
    let report = gradient_check(&params, &images, &labels, 0.25, args.seed, args.samples, args.step, args.seed)?;
    for t in &report.tensors {
        println!(
            "{:<8} sampled {:<4} max_rel_err {:.3e} max_abs_err {:.3e} reduced_step {} replaced {}",
            t.name, t.sampled, t.max_rel_err, t.max_abs_err, t.reduced_step, t.replaced
        );
    }
    let worst = report.max_rel_err();
    let ok = worst < args.tolerance;
    println!("max relative error {worst:.3e} (tolerance {:.0e}): {}", args.tolerance, if ok { "ok" } else { "FAILED" });
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(EXIT_PARTIAL) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    let result = match &cli.command {
        Command::Generate(a) => run_grid(a, Stages::GENERATE, false),
        Command::Train(a) => run_grid(a, Stages::TRAIN, false),
        Command::Attack(a) => run_grid(a, Stages::ATTACK, false),
        Command::Analyze(a) => run_grid(a, Stages::ANALYZE, false),
        Command::Sweep(a) => run_grid(a, Stages::ALL, true),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_PARTIAL)
        }
    }
}
