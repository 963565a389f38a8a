use std::io::{BufRead, Write};
use std::sync::Arc;

use super::compare::{compare_traces, TraceDiff};
use super::HarnessError;
use crate::canonical;
use crate::model::{CommandCompletion, ErrorOrigin, PhaseCause, Trace, TraceEntry, TraceKind};
use crate::registry::ToolRegistry;
use crate::server::{ActivityServer, ServerConfig, ServerError};

/// One canonical JSON trace entry per line.
pub fn write_trace(trace: &Trace, mut out: impl Write) -> std::io::Result<()> {
    for e in &trace.entries {
        let line = canonical::to_canonical_string(e).map_err(std::io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_trace(input: impl BufRead) -> Result<Trace, HarnessError> {
    let mut entries = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| HarnessError::Io("trace".into(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: TraceEntry = serde_json::from_str(&line)
            .map_err(|e| HarnessError::Parse(format!("trace line {}", n + 1), e.to_string()))?;
        entries.push(e);
    }
    let instance_id = entries
        .iter()
        .find_map(|e| match &e.kind {
            TraceKind::EventReceived { event } => Some(event.instance_id.clone()),
            _ => None,
        })
        .unwrap_or_default();
    Ok(Trace { instance_id, entries })
}

/// Feeds the external inputs recorded in `trace` to a fresh server and
/// returns the trace it produces. Derived entries are regenerated, not
/// copied.
pub fn replay(trace: &Trace, registry: Arc<ToolRegistry>, config: ServerConfig) -> Result<Trace, HarnessError> {
    let server = ActivityServer::new(registry, config);
    let mut id: Option<String> = None;
    let need = |id: &Option<String>| {
        id.clone()
            .ok_or_else(|| HarnessError::InvalidScript("trace does not start with instance creation".into()))
    };
    for entry in &trace.entries {
        match &entry.kind {
            TraceKind::InstanceCreated { definition } => {
                if id.is_some() {
                    return Err(HarnessError::InvalidScript("trace creates two instances".into()));
                }
                id = Some(server.create_activity(definition.clone())?);
            }
            TraceKind::ParticipantJoined { user_id, role } => {
                server.join(&need(&id)?, user_id, role)?;
            }
            TraceKind::EventReceived { event } => {
                let mut ev = event.clone();
                ev.instance_id = need(&id)?;
                match server.receive_event(ev) {
                    Ok(_) | Err(ServerError::CascadeDepthExceeded(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            TraceKind::CommandCompleted {
                command_id, outcome, ..
            } => {
                server.complete_command(CommandCompletion {
                    command_id: command_id.clone(),
                    instance_id: need(&id)?,
                    outcome: outcome.clone(),
                })?;
            }
            TraceKind::BindingAdded { binding } => {
                server.add_live_binding(&need(&id)?, binding.clone())?;
            }
            TraceKind::BindingRemoved { binding_id } => {
                server.remove_live_binding(&need(&id)?, binding_id)?;
            }
            TraceKind::Error {
                origin: ErrorOrigin::Host,
                code,
                detail,
            } => server.report_host_error(&need(&id)?, code, detail)?,
            TraceKind::PhaseChanged {
                to,
                cause: PhaseCause::External(cause),
                ..
            } => match server.transition_phase(&need(&id)?, to, cause) {
                Ok(_) | Err(ServerError::CascadeDepthExceeded(_)) => {}
                Err(e) => return Err(e.into()),
            },
            TraceKind::GuardEvaluated { .. }
            | TraceKind::CommandDispatched { .. }
            | TraceKind::PhaseChanged { .. }
            | TraceKind::Error { .. } => {}
        }
    }
    Ok(server.trace(&need(&id)?)?)
}

/// Replays `trace` and compares the result with it.
pub fn check_replay(trace: &Trace, registry: Arc<ToolRegistry>, config: ServerConfig) -> Result<TraceDiff, HarnessError> {
    let again = replay(trace, registry, config)?;
    Ok(compare_traces(trace, &again))
}
