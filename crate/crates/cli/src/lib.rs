//! Scenario-driven runner: generate a network, excite it, check persistency
//! of excitation, then run and sweep the distributed controller.
//!
//! Exit codes: 0 ok, 1 i/o, 2 parse or usage, 3 failed precondition,
//! 4 solver divergence, 5 infeasible step.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod pipeline;
pub mod report;
pub mod scenario;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("{0}")]
    Divergence(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Parse(_) | CliError::Usage(_) => 2,
            CliError::Precondition(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Infeasible(_) => 5,
        }
    }

    pub fn from_core(e: ddpc::Error) -> Self {
        match e {
            ddpc::Error::Divergence { .. } => CliError::Divergence(e.to_string()),
            ddpc::Error::Infeasible(_) => CliError::Infeasible(e.to_string()),
            ddpc::Error::Io(_) | ddpc::Error::Csv(_) => CliError::Io(e.to_string()),
            ddpc::Error::Format(_) => CliError::Parse(e.to_string()),
            _ => CliError::Precondition(e.to_string()),
        }
    }

    pub fn from_oracle(e: ddpc_oracle::OracleError) -> Self {
        match e {
            ddpc_oracle::OracleError::Core(core) => CliError::from_core(core),
            ddpc_oracle::OracleError::Dimension(_) => CliError::Precondition(e.to_string()),
            other => CliError::Infeasible(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
