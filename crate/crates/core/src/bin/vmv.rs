//! `vmv <subcommand> --config <file> [--out <dir>] [--workers k] [--seed s]`
//!
//! Exit codes: 0 success, 1 validation, 2 runtime, 3 budget guard.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vmv_core::harness::{
    execute, load_config_as, rerun, resolve_workers, ExperimentKind, HarnessError, ModelRegistry,
    WORKERS_ENV,
};

#[derive(Parser)]
#[command(name = "vmv", version, about = "Volterra McKean-Vlasov experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; overrides the environment and `run.workers`.
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
    /// Root seed (decimal or 0x-hex); overrides `run.seed`.
    #[arg(long, value_parser = parse_seed)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Particle ensembles per eps, limit path and sup-deviation scaling.
    Simulate(Common),
    /// Deterministic limit path.
    Limit(Common),
    /// Fluctuation gap between Z^eps and its Gaussian limit.
    Clt(Common),
    /// Large-deviation rate of a target path.
    LdpRate(Common),
    /// Moderate-deviation rate of a target path.
    MdpRate(Common),
    /// Least rate to reach a terminal halfspace.
    RateMin(Common),
    /// Monte Carlo tail probabilities next to the optimized rate.
    TailProbe(Common),
    /// Resolvent of K1 on the grid.
    Resolvent(Common),
    /// Regularity exponent and class-K check of each kernel.
    KernelProbe(Common),
    /// Validate a config and print it with every default filled in.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-run the config stored in a manifest and compare artifact hashes.
    Rerun {
        /// Path to a `manifest.toml`.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = WORKERS_ENV)]
        workers: Option<usize>,
    },
}

fn parse_seed(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    parsed.map_err(|_| format!("'{s}' is not a 64-bit seed"))
}

fn experiment(
    kind: ExperimentKind,
    args: Common,
    registry: &ModelRegistry,
) -> Result<(), HarnessError> {
    let mut cfg = load_config_as(&args.config, registry, Some(kind))?;
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    let workers = resolve_workers(args.workers, &cfg)?;
    let report = execute(&cfg, registry, workers)?;
    println!(
        "wrote {} files to {}",
        report.artifacts.files.len() + 1,
        report.out_dir.display()
    );
    for (name, body) in &report.artifacts.files {
        if name.ends_with(".txt") {
            print!("{body}");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let registry = ModelRegistry::builtin();
    let (kind, args) = match cli.command {
        Command::Validate { config } => {
            let cfg = vmv_core::harness::load_config(&config, &registry)?;
            print!("{}", cfg.to_toml());
            return Ok(());
        }
        Command::Rerun {
            config,
            out,
            workers,
        } => {
            let r = rerun(&config, out.as_deref(), &registry, workers)?;
            if r.identical() {
                println!(
                    "reproduced {} artifacts bitwise in {}",
                    r.report.manifest.files.len(),
                    r.report.out_dir.display()
                );
                return Ok(());
            }
            return Err(HarnessError::Runtime(format!(
                "artifacts differ from the manifest: {}",
                r.mismatched.join(", ")
            )));
        }
        Command::Simulate(a) => (ExperimentKind::Simulate, a),
        Command::Limit(a) => (ExperimentKind::Limit, a),
        Command::Clt(a) => (ExperimentKind::Clt, a),
        Command::LdpRate(a) => (ExperimentKind::LdpRate, a),
        Command::MdpRate(a) => (ExperimentKind::MdpRate, a),
        Command::RateMin(a) => (ExperimentKind::RateMin, a),
        Command::TailProbe(a) => (ExperimentKind::TailProbe, a),
        Command::Resolvent(a) => (ExperimentKind::Resolvent, a),
        Command::KernelProbe(a) => (ExperimentKind::KernelProbe, a),
    };
    experiment(kind, args, &registry)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
