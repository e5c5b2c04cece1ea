//! Failure classes and their exit codes.

use std::fmt;

use deconflow::checkpoint::CheckpointError;
use deconflow::deconfound::DeconfoundError;
use deconflow::eval::{EvalError, SweepError};
use deconflow::flow::FlowError;
use deconflow::io::TableError;
use deconflow::sim::SimError;
use deconflow::tabular::TabularError;
use deconflow::train::TrainError;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config. Exit code 1.
    Usage(String),
    /// Unreadable, malformed or mismatched input, or an unwritable output.
    /// Exit code 2.
    Data(String),
    /// Training or estimation broke down numerically. Exit code 3.
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(m) => write!(f, "data: {m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<TableError> for CliError {
    fn from(e: TableError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let m = e.to_string();
        match e {
            SimError::Unreachable { .. } | SimError::Invalid(_) => CliError::Usage(m),
            SimError::NonConvergence { .. } | SimError::Validation(_) => CliError::Numeric(m),
            SimError::Io { .. } | SimError::Format(_) => CliError::Data(m),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        let m = e.to_string();
        match e {
            FlowError::Dimension { .. } | FlowError::NotLinear => CliError::Data(m),
            _ => CliError::Numeric(m),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let m = e.to_string();
        match e {
            TrainError::Config(_) => CliError::Usage(m),
            TrainError::TooFewRows { .. } | TrainError::BadData => CliError::Data(m),
            TrainError::NonFinite { .. } | TrainError::Gmm(_) => CliError::Numeric(m),
            TrainError::Flow(f) => f.into(),
        }
    }
}

impl From<DeconfoundError> for CliError {
    fn from(e: DeconfoundError) -> Self {
        let m = e.to_string();
        match e {
            DeconfoundError::NoResamples | DeconfoundError::PoolTooSmall { .. } => CliError::Usage(m),
            DeconfoundError::Dimension { .. } | DeconfoundError::Length(..) | DeconfoundError::EmptyPool => {
                CliError::Data(m)
            }
            DeconfoundError::RankDeficient | DeconfoundError::CausalOrder { .. } => CliError::Numeric(m),
            DeconfoundError::Flow(f) => f.into(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let m = e.to_string();
        match e {
            EvalError::Length(..) | EvalError::Empty => CliError::Data(m),
            EvalError::Weights => CliError::Usage(m),
            EvalError::Bandwidth { .. } => CliError::Numeric(m),
        }
    }
}

impl From<TabularError> for CliError {
    fn from(e: TabularError) -> Self {
        match e {
            TabularError::Table(t) => t.into(),
            TabularError::NoCauses | TabularError::Overlap(_) => CliError::Usage(e.to_string()),
            TabularError::Train(t) => t.into(),
            TabularError::Deconfound(d) => d.into(),
        }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        let m = e.to_string();
        match e {
            SweepError::Ledger { .. } => CliError::Data(m),
            SweepError::Config(_) => CliError::Usage(m),
        }
    }
}
