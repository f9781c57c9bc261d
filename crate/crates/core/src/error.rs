use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Snapshot taken when a training step produced a non-finite loss.
#[derive(Debug, Clone)]
pub struct NonFiniteDiagnostic {
    pub step: u64,
    pub total: f64,
    pub frame: f64,
    pub mid: f64,
    pub high: f64,
    /// Gradient L2 norm per parameter group (encoder, predictor levels, heads).
    pub grad_norms: Vec<(String, f64)>,
}

impl std::fmt::Display for NonFiniteDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "step {}: total={} frame={} mid={} high={}",
            self.step, self.total, self.frame, self.mid, self.high
        )?;
        for (group, norm) in &self.grad_norms {
            write!(f, " |grad {group}|={norm}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("checksum mismatch in {}: file is corrupted", path.display())]
    Checksum { path: PathBuf },

    #[error("format version mismatch: file has version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },

    #[error("scheduling error: {0}")]
    Schedule(String),

    #[error("state error: {0}")]
    State(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("non-finite loss at {0}")]
    NonFinite(Box<NonFiniteDiagnostic>),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}
