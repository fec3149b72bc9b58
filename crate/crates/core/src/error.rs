use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("singular system: smallest eigenvalue of H + beta*I is {min_eig:e} (beta = {beta:e}); increase beta")]
    Singular { min_eig: f64, beta: f64 },

    #[error("training aborted at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("divergence at step {step}: |x| = {norm:e}")]
    Divergence { step: usize, norm: f64, last: Vec<f64> },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Unsupported(_) => 2,
            Error::Io(_) | Error::Parse { .. } | Error::Schema(_) => 3,
            Error::Numeric(_) | Error::Singular { .. } | Error::Divergence { .. } => 4,
            Error::Step { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
