use std::path::PathBuf;

/// Error categories of the file-format and command layer. Each maps to a
/// distinct process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: unsupported {what} version {found} (this build reads version {supported})")]
    Version { path: PathBuf, what: &'static str, found: String, supported: u32 },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{0} is locked by another run (remove the .lock file if stale)")]
    Locked(PathBuf),
    #[error("{0}")]
    Pipeline(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::CheckFailed(_) => 1,
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Version { .. } => 3,
            Error::Io { .. } | Error::Locked(_) => 4,
            Error::Parse { .. } | Error::Format { .. } => 5,
            Error::Pipeline(_) => 6,
        }
    }
}

macro_rules! pipeline_from {
    ($($t:ty),* $(,)?) => {
        $(impl From<$t> for Error {
            fn from(e: $t) -> Self {
                Error::Pipeline(e.to_string())
            }
        })*
    };
}

pipeline_from!(
    oilad_core::mdp::MdpError,
    oilad_core::traj::TrajError,
    oilad_core::policy::PolicyError,
    oilad_core::training::TrainError,
    oilad_core::features::FeatureError,
    oilad_core::iforest::ForestError,
    oilad_core::eval::EvalError,
    oilad_core::autodiff::AutodiffError,
);

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format { path: PathBuf::from("<csv>"), msg: e.to_string() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
