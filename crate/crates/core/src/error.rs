use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("cannot reduce over an empty axis")]
    EmptyAxis,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("value {value} outside polynomial domain [{lo}, {hi}]{}", site_suffix(.site))]
    DomainViolation {
        value: f64,
        lo: f64,
        hi: f64,
        site: Option<String>,
    },

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid degree: {0}")]
    InvalidDegree(String),

    #[error("remez exchange did not converge after {iterations} iterations (last residual spread {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("function returned a non-finite value at x = {0}")]
    NonFinite(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing frozen statistics for {0}")]
    MissingStats(String),

    #[error("token {token} out of vocabulary of size {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },

    #[error("unsupported architecture: {0}")]
    Unsupported(String),

    #[error("missing recorded range for site {0}")]
    MissingRange(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("cycle detected in polynomial graph at node {0}")]
    Cycle(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("stage {stage} failed: {detail}")]
    Stage { stage: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn site_suffix(site: &Option<String>) -> String {
    match site {
        Some(s) => format!(" at site {s}"),
        None => String::new(),
    }
}
