use thiserror::Error;

/// Errors raised by the solvers, trainers and propagator assemblies.
#[derive(Debug, Error)]
pub enum DmftError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index out of range: {what} = {value}, limit {limit}")]
    Index {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix not positive semidefinite after jitter {jitter:e}; most negative eigenvalue {min_eigenvalue:e}")]
    NotPsd { jitter: f64, min_eigenvalue: f64 },

    #[error("singular system (condition estimate {condition:e}): {context}")]
    Singular { condition: f64, context: String },

    #[error("divergence at step {step}: {context}")]
    Divergence { step: usize, context: String },

    #[error("ensemble member with seed stream {member} diverged: {source}")]
    MemberDiverged {
        member: u64,
        #[source]
        source: Box<DmftError>,
    },

    #[error("fixed point did not converge after {iterations} iterations; residuals {residuals:?}")]
    NoConvergence {
        iterations: usize,
        residuals: Vec<f64>,
    },

    #[error("insufficient samples: {got} < {needed} ({context})")]
    InsufficientSamples {
        got: usize,
        needed: usize,
        context: &'static str,
    },

    #[error("rate fit failed: {0}")]
    Fit(String),

    #[error("schema: {0}")]
    Schema(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DmftError>;
