//! Deterministic end-to-end driver: scripted users, logical ticks, and
//! quiescence between ticks instead of sleeps.

use std::time::Duration;

use thiserror::Error;

use crate::host::HostError;
use crate::server::ServerError;
use crate::wire::WireError;

pub mod compare;
pub mod replay;
pub mod scenario;

pub use compare::{compare_traces, normalize, TraceDiff};
pub use replay::{check_replay, read_trace, replay, write_trace};
pub use scenario::{
    load_definition, run_scenario, DefinitionRef, ExpectResult, Predicate, Rig, RunMode,
    RunOptions, ScenarioRun, ScenarioScript, Step, StepAction,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("{0}: {1}")]
    Parse(String, String),
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("no host for user `{0}`")]
    UnknownUser(String),
    #[error("step {step}: {detail}")]
    UnexpectedOutcome { step: usize, detail: String },
    #[error("no quiescence within {budget:?} at tick {at}")]
    ScenarioTimeout { at: u64, budget: Duration },
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("host `{user}`: {source}")]
    Host {
        user: String,
        #[source]
        source: HostError,
    },
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl HarnessError {
    pub(crate) fn host(user: &str, source: HostError) -> Self {
        HarnessError::Host {
            user: user.into(),
            source,
        }
    }
}
