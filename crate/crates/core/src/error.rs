use alloc::string::String;

use crate::lp::LpStatus;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown constraint family `{0}`")]
    UnknownFamily(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("action {0} is not feasible in the current state")]
    InfeasibleAction(usize),
    #[error("state is terminal (empty feasible mask)")]
    Terminal,
    #[error("numerical domain error: {0}")]
    Domain(String),
    #[error("LP solver finished with status {0:?}")]
    Solver(LpStatus),
    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("instance with {0} nodes is over the exhaustive-enumeration cap")]
    TooLarge(usize),
}
