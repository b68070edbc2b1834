use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use etkpf_harness::{
    compare, rescore, run_cycled, run_forecast, ExperimentConfig, HarnessError, THREADS_ENV,
};

/// Ensemble transform Kalman particle filter experiments.
#[derive(Parser)]
#[command(name = "etkpf", version)]
struct Cli {
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    /// Output location: archive directory for `cycle`, result directory for
    /// `forecast`, CSV file for `compare`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a cycled twin experiment and archive it.
    Cycle { config: PathBuf },
    /// Launch forecasts from the analyses of an archive.
    Forecast {
        config: PathBuf,
        #[arg(long)]
        archive: PathBuf,
    },
    /// Recompute the score table of an archive.
    Score { dir: PathBuf },
    /// Score deltas of archives relative to the first.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli, path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    match &cli.command {
        Command::Cycle { config } => {
            let mut cfg = load_config(cli, config)?;
            if let Some(out) = &cli.output {
                cfg.output = out.clone();
            }
            let r = run_cycled(&cfg)?;
            let after = |m| {
                r.mean_after(cfg.spinup_cycles, "state", m)
                    .unwrap_or(f64::NAN)
            };
            println!(
                "{}: {} cycles, background rmse {:.4}, spread {:.4}, crps {:.4}, climatological std {:.4}",
                r.archive.display(),
                r.completed,
                after(etkpf::verify::Metric::Rmse),
                after(etkpf::verify::Metric::Spread),
                after(etkpf::verify::Metric::Crps),
                r.climatology_std
            );
        }
        Command::Forecast { config, archive } => {
            let cfg = load_config(cli, config)?;
            let out = cli.output.clone().unwrap_or_else(|| archive.clone());
            let f = run_forecast(&cfg, archive, &out)?;
            println!(
                "{}: {} forecast scores written to {}",
                archive.display(),
                f.scores.len(),
                out.join("forecast.csv").display()
            );
        }
        Command::Score { dir } => {
            let s = rescore(dir)?;
            println!("{}: {} scores", dir.join("scores.csv").display(), s.len());
        }
        Command::Compare { dirs } => {
            let csv = compare(dirs)?;
            match &cli.output {
                Some(p) => std::fs::write(p, csv).map_err(|e| HarnessError::io(p, e))?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error [harness]: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.module());
            match e {
                HarnessError::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
