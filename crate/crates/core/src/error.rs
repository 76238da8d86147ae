use thiserror::Error;

/// Errors surfaced by parsing, solving, attacking and evaluating.
#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error on line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("invalid power system: {}", .0.join("; "))]
    Semantic(Vec<String>),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("singular Jacobian in {context}")]
    Singular { context: String },

    #[error("{context} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        context: String,
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("infeasible case: maximum constraint violation {max_violation:.3e}")]
    Infeasible { max_violation: f64 },

    #[error("solution is stale: it was computed for a different dispatch or attack")]
    StaleSolution,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("attack aborted at iteration {iteration}: {source}")]
    AttackAborted {
        iteration: usize,
        #[source]
        source: Box<Error>,
        trace: Box<crate::attack::AttackTrace>,
    },

    #[error("finite-difference evaluation failed at coordinate {coordinate}: {source}")]
    Coordinate {
        coordinate: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("run aborted after {} iterations: {reason}", .history.records.len())]
    RunAborted {
        reason: String,
        history: Box<crate::driver::RunHistory>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
