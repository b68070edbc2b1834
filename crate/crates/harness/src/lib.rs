//! Experiment harness: configuration, cycled twin runs, forecasts, scoring
//! and archives.

pub mod archive;
pub mod config;
pub mod error;
pub mod run;

pub use config::{ConfigError, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use run::{compare, rescore, run_cycled, run_forecast, CycledRun, ForecastRun};

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "ETKPF_THREADS";

/// Runs `f` on a dedicated pool of `threads` workers (0 = rayon default).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(f)
}
