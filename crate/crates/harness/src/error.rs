use std::path::PathBuf;

use crate::config::ConfigError;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(#[from] ConfigError),

    #[error("{source}")]
    Core {
        module: &'static str,
        #[source]
        source: etkpf::Error,
    },

    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },

    #[error(
        "filter diverged at cycle {cycle}: background RMSE above {threshold:.4} \
         (10x climatological std) for {consecutive} consecutive cycles, last {rmse:.4}"
    )]
    Diverged {
        cycle: usize,
        rmse: f64,
        threshold: f64,
        consecutive: usize,
    },

    #[error("{0}")]
    Archive(String),

    #[error("cycle {cycle}: {source}")]
    Cycle {
        cycle: usize,
        #[source]
        source: Box<HarnessError>,
    },
}

impl HarnessError {
    /// Short tag of the module the failure originated in.
    pub fn module(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Core { module, .. } => module,
            HarnessError::Io { .. } | HarnessError::Archive(_) => "archive",
            HarnessError::Diverged { .. } => "harness",
            HarnessError::Cycle { source, .. } => source.module(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, e: impl std::fmt::Display) -> Self {
        HarnessError::Io {
            path: path.into(),
            message: e.to_string(),
        }
    }
}

/// Attaches a module tag to a core error. Numerical failures are tagged by
/// where they arise rather than by the caller.
pub fn core(module: &'static str) -> impl Fn(etkpf::Error) -> HarnessError {
    move |source| {
        let module = match &source {
            etkpf::Error::Site { .. } => "local",
            etkpf::Error::EigenNonConvergence { .. }
            | etkpf::Error::SchurNonConvergence { .. }
            | etkpf::Error::SingularLyapunov { .. }
            | etkpf::Error::CareNotConverged { .. }
            | etkpf::Error::CareIteration { .. } => "linalg",
            etkpf::Error::NonFinite { .. } => "models",
            etkpf::Error::Io(_) => "archive",
            _ => module,
        };
        HarnessError::Core { module, source }
    }
}
