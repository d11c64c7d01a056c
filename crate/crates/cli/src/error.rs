use netcbf::cbf::CbfError;
use netcbf::contract::ContractError;
use netcbf::grid::GridError;
use netcbf::scenario::ScenarioError;
use netcbf::stl::StlError;
use netcbf::tube_mpc::MpcError;
use thiserror::Error;

pub const USAGE: i32 = 1;
pub const CONFIG: i32 = 2;
pub const VIOLATION: i32 = 3;
pub const INFEASIBLE: i32 = 4;

#[derive(Debug, Error)]
#[error("{msg}")]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: CONFIG, msg: msg.into() }
    }

    pub fn infeasible(msg: impl Into<String>) -> Self {
        Self { code: INFEASIBLE, msg: msg.into() }
    }

    pub fn violation(msg: impl Into<String>) -> Self {
        Self { code: VIOLATION, msg: msg.into() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::config(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::config(format!("json: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::config(format!("csv: {e}"))
    }
}

fn grid_code(e: &GridError) -> i32 {
    match e {
        GridError::Controller { .. } | GridError::InputOutOfRange { .. } => INFEASIBLE,
        _ => CONFIG,
    }
}

fn contract_code(e: &ContractError) -> i32 {
    match e {
        ContractError::Malformed(_) | ContractError::Stl(_) => CONFIG,
        _ => INFEASIBLE,
    }
}

fn mpc_code(e: &MpcError) -> i32 {
    match e {
        MpcError::SourceMissing(_) | MpcError::Invalid(_) | MpcError::Io(_) => CONFIG,
        MpcError::Contract(c) => contract_code(c),
        _ => INFEASIBLE,
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        let code = match &e {
            ScenarioError::Grid(g) => grid_code(g),
            ScenarioError::Contract(c) => contract_code(c),
            ScenarioError::Stl(_) => CONFIG,
            ScenarioError::Mpc(m) => mpc_code(m),
            ScenarioError::Cbf(_)
            | ScenarioError::BudgetExceeded { .. }
            | ScenarioError::MissingRci(_)
            | ScenarioError::NoFeedforwardRoom { .. } => INFEASIBLE,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        Self { code: grid_code(&e), msg: e.to_string() }
    }
}

impl From<ContractError> for CliError {
    fn from(e: ContractError) -> Self {
        Self { code: contract_code(&e), msg: e.to_string() }
    }
}

impl From<MpcError> for CliError {
    fn from(e: MpcError) -> Self {
        Self { code: mpc_code(&e), msg: e.to_string() }
    }
}

impl From<CbfError> for CliError {
    fn from(e: CbfError) -> Self {
        Self::infeasible(e.to_string())
    }
}

impl From<StlError> for CliError {
    fn from(e: StlError) -> Self {
        Self::config(e.to_string())
    }
}
