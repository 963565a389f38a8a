use serde::{Deserialize, Serialize};

use super::types::{
    ActivityDefinition, Binding, Command, CompletionOutcome, InterActivityEvent, Trigger,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseCause {
    Binding(String),
    External(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorOrigin {
    /// Raised by the server while processing an input; regenerated on replay.
    Server,
    /// Reported by a host; an external input on replay.
    Host,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
pub enum TraceKind {
    InstanceCreated {
        definition: ActivityDefinition,
    },
    ParticipantJoined {
        user_id: String,
        role: String,
    },
    EventReceived {
        event: InterActivityEvent,
    },
    GuardEvaluated {
        binding_id: String,
        trigger: Trigger,
        depth: u32,
        passed: bool,
        /// Seq of the evaluation whose effects produced this trigger.
        parent_seq: Option<u64>,
        note: Option<String>,
    },
    CommandDispatched {
        binding_id: String,
        command: Command,
    },
    CommandCompleted {
        command_id: String,
        slot_id: String,
        command_name: String,
        outcome: CompletionOutcome,
    },
    PhaseChanged {
        from: String,
        to: String,
        cause: PhaseCause,
    },
    BindingAdded {
        binding: Binding,
    },
    BindingRemoved {
        binding_id: String,
    },
    Error {
        origin: ErrorOrigin,
        code: String,
        detail: String,
    },
}

impl TraceKind {
    pub fn name(&self) -> &'static str {
        match self {
            TraceKind::InstanceCreated { .. } => "instance_created",
            TraceKind::ParticipantJoined { .. } => "participant_joined",
            TraceKind::EventReceived { .. } => "event_received",
            TraceKind::GuardEvaluated { .. } => "guard_evaluated",
            TraceKind::CommandDispatched { .. } => "command_dispatched",
            TraceKind::CommandCompleted { .. } => "command_completed",
            TraceKind::PhaseChanged { .. } => "phase_changed",
            TraceKind::BindingAdded { .. } => "binding_added",
            TraceKind::BindingRemoved { .. } => "binding_removed",
            TraceKind::Error { .. } => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub seq: u64,
    /// Wall-clock stamp, milliseconds since the Unix epoch.
    pub time_ms: u64,
    #[serde(flatten)]
    pub kind: TraceKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub instance_id: String,
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    /// Checks the two structural trace invariants: seq never decreases and
    /// every completion follows the dispatch of the same command.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut last = 0;
        let mut dispatched = std::collections::HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.seq < last {
                return Err(format!("entry {i}: seq {} after {last}", e.seq));
            }
            last = e.seq;
            match &e.kind {
                TraceKind::CommandDispatched { command, .. } => {
                    dispatched.insert(command.command_id.as_str());
                }
                TraceKind::CommandCompleted { command_id, .. } if !dispatched.contains(command_id.as_str()) => {
                    return Err(format!("entry {i}: completion of undispatched {command_id}"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn count(&self, pred: impl Fn(&TraceKind) -> bool) -> usize {
        self.entries.iter().filter(|e| pred(&e.kind)).count()
    }
}
