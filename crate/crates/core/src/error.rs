use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("invalid action space: {0}")]
    ActionSpace(String),

    #[error("non-finite integrand value {value} at quadrature node {index} (u = {u})")]
    NonFiniteIntegrand { index: usize, u: f64, value: f64 },

    #[error("exponent is -inf at every quadrature node (empty effective support)")]
    EmptySupport,

    #[error("non-finite model value at grid node {node} (x = {x}, u = {u}): {what}")]
    NonFiniteModel {
        node: usize,
        x: f64,
        u: f64,
        what: &'static str,
    },

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("field `{name}` has length {got}, expected {expected}")]
    FieldLength {
        name: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("singular tridiagonal system: pivot {pivot:e} at row {row}")]
    Singular { row: usize, pivot: f64 },

    #[error(
        "policy iteration diverged at iteration {iteration}: sup|v| = {sup_abs} exceeds 10x the uniform bound {bound}"
    )]
    Diverged {
        iteration: usize,
        sup_abs: f64,
        bound: f64,
    },

    #[error("assumptions not established: {0}")]
    Assumptions(String),

    #[error("rollout: {aborted} of {total} paths produced a non-finite state")]
    RolloutAborted { aborted: usize, total: usize },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("{0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}
