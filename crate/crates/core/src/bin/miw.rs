use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use miw::harness::{self, drivers, RunConfig, SweepConfig};
use miw::MiwError;

#[derive(Parser)]
#[command(name = "miw", version, about = "Many-interacting-worlds ground and excited states")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Relax one ensemble.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the jitter seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Grid eigenstates for the config's potential and region.
    Numerov {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Relax and solve over a list of μ or ν values.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Compare a run directory with a grid directory.
    Compare {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        numerov: PathBuf,
        #[arg(long, default_value_t = 0)]
        state: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config_code(e: &MiwError) -> u8 {
    match e {
        MiwError::Config(_) | MiwError::InvalidRegion(_) | MiwError::InvalidLayout(_) | MiwError::SymmetryViolation(_) => 2,
        MiwError::KernelNotSmooth(_) | MiwError::MismatchedProblem(_) => 2,
        _ => 7,
    }
}

fn set_jobs(jobs: Option<usize>) {
    if let Some(n) = jobs {
        // only fails when a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn out_dir(explicit: Option<PathBuf>, config_default: Option<&String>, fallback: &str) -> PathBuf {
    explicit.or_else(|| config_default.map(PathBuf::from)).unwrap_or_else(|| PathBuf::from(fallback))
}

fn run(cli: Cli) -> Result<u8, MiwError> {
    match cli.command {
        Command::Run { config, out, seed, jobs } => {
            set_jobs(jobs);
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = out_dir(out, cfg.output.as_ref(), "miw-run");
            let result = drivers::cmd_run(&cfg, &dir)?;
            let rec = &result.artifact.record;
            println!(
                "{} iterations, termination {:?}, E = {}",
                rec.trace.len(),
                rec.termination,
                rec.final_eq3().map_or("n/a".to_string(), |e| format!("{e:.6}"))
            );
            Ok(harness::exit_code(&rec.termination) as u8)
        }
        Command::Numerov { config, out, jobs } => {
            set_jobs(jobs);
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir(out, None, "miw-numerov");
            let art = drivers::cmd_numerov(&cfg, &dir)?;
            for (k, e) in art.solution.eigenvalues.iter().enumerate() {
                println!("E{k} = {e:.6}");
            }
            Ok(0)
        }
        Command::Sweep { config, out, seed, jobs } => {
            set_jobs(jobs);
            let mut cfg = SweepConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.base.seed = s;
            }
            let dir = out_dir(out, cfg.base.output.as_ref(), "miw-sweep");
            let report = drivers::cmd_sweep(&cfg, &dir)?;
            print!("{}", String::from_utf8_lossy(&report.csv()?));
            Ok(if report.any_aborted() { 4 } else { 0 })
        }
        Command::Compare { run, numerov, state, out } => {
            let report = drivers::cmd_compare(&run, &numerov, state, out.as_deref())?;
            print!("{}", String::from_utf8_lossy(&report.csv()?));
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MIW_LOG_LEVEL", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            ExitCode::from(config_code(&e))
        }
    }
}
