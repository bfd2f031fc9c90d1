use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hypfio::config::{EquationKind, ScenarioConfig};
use hypfio::scenario::{run_check, run_eikonal_dump, run_simulate, RunOptions};
use hypfio::verify::{run_suite, VerifyOptions};
use hypfio::Error;

#[derive(Parser)]
#[command(name = "hypfio", version, about = "Fourier integral operator solvers for hyperbolic SPDEs")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides noise.seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo moments of the random-field solution at the probe points.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Simulate even if an admissibility condition fails.
        #[arg(long)]
        override_admissibility: bool,
    },
    /// Tabulate the spectral-measure integrals; the verdict is data.
    Check {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run a verification suite.
    Verify {
        /// wave-oracle, eikonal, factorial-decay, kernel-ft, moments or lemmas-weak
        suite: String,
        /// Scenario whose weak exponent k replaces the default k = 3, 4, 6.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write phase tables of the characteristic roots.
    EikonalDump {
        #[command(flatten)]
        run: RunArgs,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Expr { .. } | Error::WeakExponent(_) => 2,
        Error::Admissibility(_) => 3,
        Error::Horizon { .. } => 4,
        _ => 1,
    }
}

fn run_options(run: &RunArgs, threads: usize, override_admissibility: bool) -> RunOptions {
    RunOptions { out_dir: run.out.clone(), seed: run.seed, override_admissibility, threads }
}

fn report(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn run(cli: Cli, threads: usize) -> Result<bool, Error> {
    match cli.command {
        Command::Simulate { run, override_admissibility } => {
            let (cfg, src) = ScenarioConfig::load(&run.config)?;
            let r = run_simulate(&cfg, &src, &run_options(&run, threads, override_admissibility))?;
            report(&r.files);
            Ok(true)
        }
        Command::Check { run } => {
            let (cfg, src) = ScenarioConfig::load(&run.config)?;
            let r = run_check(&cfg, &src, &run_options(&run, threads, false))?;
            report(&r.files);
            Ok(true)
        }
        Command::EikonalDump { run } => {
            let (cfg, src) = ScenarioConfig::load(&run.config)?;
            let r = run_eikonal_dump(&cfg, &src, &run_options(&run, threads, false))?;
            report(&r.files);
            Ok(true)
        }
        Command::Verify { suite, config, seed } => {
            let mut opts = VerifyOptions::default();
            if let Some(path) = config {
                let (cfg, _) = ScenarioConfig::load(&path)?;
                if cfg.equation.kind == EquationKind::Weak {
                    opts.weak_ks = cfg.equation.k.into_iter().collect();
                }
            }
            if let Some(s) = seed {
                opts.seed = s;
            }
            let lines = run_suite(&suite, &opts)?;
            for l in &lines {
                println!("{l}");
            }
            Ok(lines.iter().all(|l| l.pass))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    let threads = rayon::current_num_threads();
    match run(cli, threads) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
