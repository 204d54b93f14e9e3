use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LapoError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("finite-difference check: function is not deterministic")]
    NonDeterministic,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config: {0}")]
    Config(String),
    #[error("action component {value} at index {index} is outside [-1, 1]")]
    ActionRange { index: usize, value: f32 },
    #[error("action token {token} at index {index} is outside [0, 255]")]
    TokenRange { index: usize, token: u32 },
    #[error("environment: {0}")]
    Env(String),
    #[error("{what}: parse error at byte offset {offset}: {msg}")]
    Parse {
        what: &'static str,
        offset: u64,
        msg: String,
    },
    #[error("latent cache is missing entry (traj {traj}, t {t}, j {j})")]
    MissingLatent { traj: u32, t: u32, j: u32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LapoError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LapoError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that should map to the numeric-abort exit status.
    pub fn is_numeric(&self) -> bool {
        matches!(self, LapoError::NonFinite { .. } | LapoError::Numeric(_))
    }

    /// Prefixes an episode-level failure with `ctx`, keeping numeric
    /// failures numeric.
    pub fn in_episode(self, ctx: impl std::fmt::Display) -> Self {
        if self.is_numeric() {
            LapoError::Numeric(format!("{ctx}: {self}"))
        } else {
            LapoError::Env(format!("{ctx}: {self}"))
        }
    }
}

pub type Result<T> = std::result::Result<T, LapoError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episode_context_keeps_numeric_class() {
        let e = LapoError::NonFinite { op: "matmul" }.in_episode("reach/0 seed 1");
        assert!(e.is_numeric(), "{e}");
        assert!(e.to_string().contains("reach/0 seed 1"));
        let e = LapoError::Invalid("x".into()).in_episode("reach/0 seed 1");
        assert!(!e.is_numeric());
    }
}
