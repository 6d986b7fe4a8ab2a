use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid gradient scheme: {0}")]
    InvalidScheme(String),

    #[error("singular direction scheme: {0}")]
    SingularScheme(String),

    #[error("only {found} candidate subsets (need {needed} disjoint) after {trials} trials")]
    InsufficientCandidates {
        found: usize,
        needed: usize,
        trials: usize,
    },

    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    #[error("invalid subset plan: {0}")]
    InvalidPlan(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("volume {dims:?} smaller than the {window}-voxel SSIM window")]
    Window { dims: (usize, usize, usize), window: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("training diverged at epoch {epoch}, block {block}: loss = {loss}")]
    Divergence { epoch: usize, block: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
