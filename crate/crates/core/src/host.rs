//! The plugin host: one per user. It instantiates the user's tool clients
//! next to itself, captures their events, relays them to the activity server
//! and runs the commands the server sends back. Calls into tools are plain
//! in-process calls; only the host/server hop goes over a [`ServerLink`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use indexmap::IndexMap;
use serde::Serialize;
use serde_json::{json, Map, Value};
use thiserror::Error;
use uuid::Uuid;

use crate::contract::{EventSink, InstantiateContext, ToolError, ToolInstance, ToolNetwork};
use crate::model::{
    Command, CommandCompletion, CompletionOutcome, InterActivityEvent, SubActivitySlot,
    ToolDescriptor, ToolInstanceRef, ToolInstanceState, TOOL_FAILED_EVENT,
};
use crate::registry::{artifact_entry, describe_tool, PluginArtifact, RegistryError, ToolRegistry};
use crate::server::{DispatchOutcome, JoinGrant};
use crate::wire::{
    Envelope, ErrorReport, Hello, JoinRequest, MessageType, Refusal, Reply, ServerLink, StateSync,
    WireError,
};

pub const EVENT_QUEUE_BOUND: usize = 1024;
pub const DEDUP_WINDOW: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostConfig {
    pub event_queue_bound: usize,
    pub dedup_window: usize,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self {
            event_queue_bound: EVENT_QUEUE_BOUND,
            dedup_window: DEDUP_WINDOW,
        }
    }
}

#[derive(Debug, Error)]
pub enum HostError {
    #[error("tool in slot `{0}` is not running")]
    ToolUnavailable(String),
    #[error("no tool instance for slot `{0}`")]
    UnknownSlot(String),
    #[error("`{command}` is not a command of slot `{slot}`")]
    UnknownCommand { slot: String, command: String },
    #[error("argument type mismatch: {0}")]
    ArgTypeMismatch(String),
    #[error("command rejected: {code}: {reason}")]
    CommandRejected { code: String, reason: String },
    #[error("tool failed: {0}")]
    ToolFailed(String),
    #[error("unknown role `{0}`")]
    UnknownRole(String),
    #[error("instantiation failed: {0}")]
    InstantiationFailed(String),
    #[error("artifact for `{slot}` has hash {got}, expected {expected}")]
    ArtifactMismatch {
        slot: String,
        expected: String,
        got: String,
    },
    #[error("no runtime linked for entry `{0}`")]
    NoRuntime(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("server refused: {}: {}", .0.code, .0.detail)]
    Server(Refusal),
}

impl HostError {
    pub fn code(&self) -> &str {
        match self {
            HostError::ToolUnavailable(_) => "tool_unavailable",
            HostError::UnknownSlot(_) => "unknown_slot",
            HostError::UnknownCommand { .. } => "unknown_command",
            HostError::ArgTypeMismatch(_) => "arg_type_mismatch",
            HostError::CommandRejected { code, .. } => code,
            HostError::ToolFailed(_) => "tool_failed",
            HostError::UnknownRole(_) => "unknown_role",
            HostError::InstantiationFailed(_) => "instantiation_failed",
            HostError::ArtifactMismatch { .. } => "artifact_mismatch",
            HostError::NoRuntime(_) => "no_runtime",
            HostError::Registry(_) => "registry",
            HostError::Wire(_) => "wire",
            HostError::Server(r) => &r.code,
        }
    }
}

struct Hosted {
    r: ToolInstanceRef,
    descriptor: ToolDescriptor,
    tool: Box<dyn ToolInstance>,
    sink: EventSink,
}

type SlotKey = (String, String);

pub struct PluginHost {
    user_id: String,
    registry: Arc<ToolRegistry>,
    network: Arc<ToolNetwork>,
    link: Box<dyn ServerLink>,
    config: HostConfig,
    next_seq: u64,
    tools: BTreeMap<SlotKey, Hosted>,
    inbox: VecDeque<Command>,
    outgoing: VecDeque<InterActivityEvent>,
    reports: VecDeque<ErrorReport>,
    unsynced: BTreeSet<String>,
    completed: IndexMap<String, CompletionOutcome>,
    invocations: u64,
    local_errors: Vec<String>,
}

impl std::fmt::Debug for PluginHost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PluginHost")
            .field("user_id", &self.user_id)
            .field("tools", &self.tools.keys().collect::<Vec<_>>())
            .field("outgoing", &self.outgoing.len())
            .finish()
    }
}

impl PluginHost {
    /// Opens the session with a `hello`.
    pub fn connect(
        user_id: &str,
        registry: Arc<ToolRegistry>,
        network: Arc<ToolNetwork>,
        link: Box<dyn ServerLink>,
        config: HostConfig,
    ) -> Result<Self, HostError> {
        let mut host = Self {
            user_id: user_id.into(),
            registry,
            network,
            link,
            config,
            next_seq: 0,
            tools: BTreeMap::new(),
            inbox: VecDeque::new(),
            outgoing: VecDeque::new(),
            reports: VecDeque::new(),
            unsynced: BTreeSet::new(),
            completed: IndexMap::new(),
            invocations: 0,
            local_errors: Vec::new(),
        };
        host.call(
            MessageType::Hello,
            &Hello {
                host_id: user_id.into(),
            },
        )?;
        Ok(host)
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    fn call<T: Serialize>(&mut self, kind: MessageType, body: &T) -> Result<Value, HostError> {
        self.next_seq += 1;
        let reply = self.link.request(Envelope::new(kind, self.next_seq, body))?;
        for push in self.link.take_pushes() {
            match push.body_as::<Command>() {
                Ok(cmd) => self.inbox.push_back(cmd),
                Err(e) => self.local_errors.push(format!("bad command_down: {e}")),
            }
        }
        match reply.body_as::<Reply>()? {
            Reply::Ok(v) => Ok(v),
            Reply::Err(r) => Err(HostError::Server(r)),
        }
    }

    /// Joins an activity and starts a client for every slot, parameterized
    /// with the sub-role the grant assigns.
    pub fn join(&mut self, instance_id: &str, role: &str) -> Result<JoinGrant, HostError> {
        let req = JoinRequest {
            instance_id: instance_id.into(),
            user_id: self.user_id.clone(),
            role: role.into(),
        };
        let grant: JoinGrant = serde_json::from_value(self.call(MessageType::Join, &req)?)
            .map_err(|e| WireError::Malformed(e.to_string()))?;
        for g in &grant.sub_grants {
            let slot = SubActivitySlot {
                slot_id: g.slot_id.clone(),
                tool_url: g.tool_url.clone(),
                instance_params: g.instance_params.clone(),
            };
            let started = self
                .registry
                .fetch_plugin(&g.tool_url)
                .map_err(HostError::from)
                .and_then(|artifact| {
                    if artifact.artifact_hash != g.artifact_hash {
                        return Err(HostError::ArtifactMismatch {
                            slot: g.slot_id.clone(),
                            expected: g.artifact_hash.clone(),
                            got: artifact.artifact_hash,
                        });
                    }
                    self.instantiate_tool(instance_id, &artifact, &slot, g.sub_role.as_deref())
                });
            if let Err(e) = started {
                tracing::warn!(user = %self.user_id, slot = %g.slot_id, "{e}");
                self.report(instance_id, e.code(), &format!("{}: {e}", g.slot_id));
            }
        }
        self.sync(instance_id)?;
        Ok(grant)
    }

    pub fn instantiate_tool(
        &mut self,
        instance_id: &str,
        artifact: &PluginArtifact,
        slot: &SubActivitySlot,
        assigned_role: Option<&str>,
    ) -> Result<ToolInstanceRef, HostError> {
        let (descriptor, _) = describe_tool(artifact)?;
        if let Some(role) = assigned_role {
            if !descriptor.has_role(role) {
                return Err(HostError::UnknownRole(role.into()));
            }
        }
        let entry = artifact_entry(artifact)?;
        let factory = self.registry.runtime(&entry).ok_or(HostError::NoRuntime(entry))?;
        let session = format!("{instance_id}/{}", slot.slot_id);
        let mut tool = factory
            .instantiate(InstantiateContext {
                user_id: &self.user_id,
                session: &session,
                instance_params: &slot.instance_params,
                assigned_role,
                network: &self.network,
            })
            .map_err(|e| HostError::InstantiationFailed(e.to_string()))?;
        let sink = EventSink::new();
        tool.subscribe(sink.clone());
        let mut r = ToolInstanceRef {
            handle_id: format!("{}/{session}", self.user_id),
            slot_id: slot.slot_id.clone(),
            tool_id: descriptor.tool_id.clone(),
            state: ToolInstanceState::Starting,
        };
        r.state = ToolInstanceState::Running;
        self.tools.insert(
            (instance_id.into(), slot.slot_id.clone()),
            Hosted {
                r: r.clone(),
                descriptor,
                tool,
                sink,
            },
        );
        self.unsynced.insert(instance_id.into());
        Ok(r)
    }

    fn hosted(&mut self, instance_id: &str, slot: &str) -> Result<&mut Hosted, HostError> {
        self.tools
            .get_mut(&(instance_id.to_string(), slot.to_string()))
            .ok_or_else(|| HostError::UnknownSlot(slot.into()))
    }

    /// Invokes an integration command on a running tool.
    pub fn invoke(&mut self, instance_id: &str, slot: &str, command: &str, args: &Map<String, Value>) -> Result<Value, HostError> {
        let h = self.hosted(instance_id, slot)?;
        if h.r.state != ToolInstanceState::Running {
            return Err(HostError::ToolUnavailable(slot.into()));
        }
        let sig = h.descriptor.command(command).ok_or_else(|| HostError::UnknownCommand {
            slot: slot.into(),
            command: command.into(),
        })?;
        sig.check_args(args).map_err(HostError::ArgTypeMismatch)?;
        let result = h.tool.invoke(command, args);
        self.invocations += 1;
        self.settle(instance_id, slot, result)
    }

    /// Performs an ordinary user operation on the user's own tool client.
    pub fn user_action(&mut self, instance_id: &str, slot: &str, op: &str, args: &Map<String, Value>) -> Result<Value, HostError> {
        let h = self.hosted(instance_id, slot)?;
        if h.r.state != ToolInstanceState::Running {
            return Err(HostError::ToolUnavailable(slot.into()));
        }
        let result = h.tool.user_action(op, args);
        self.settle(instance_id, slot, result)
    }

    fn settle(&mut self, instance_id: &str, slot: &str, result: Result<Value, ToolError>) -> Result<Value, HostError> {
        let out = match result {
            Ok(v) => Ok(v),
            Err(ToolError::Fatal(reason)) => {
                self.fail(instance_id, slot, &reason);
                Err(HostError::ToolFailed(reason))
            }
            Err(ToolError::BadArgs(m)) => Err(HostError::ArgTypeMismatch(m)),
            Err(e) => Err(HostError::CommandRejected {
                code: e.code().into(),
                reason: e.to_string(),
            }),
        };
        self.collect(instance_id, slot);
        out
    }

    fn fail(&mut self, instance_id: &str, slot: &str, reason: &str) {
        let user = self.user_id.clone();
        let Ok(h) = self.hosted(instance_id, slot) else { return };
        if !h.r.state.can_become(ToolInstanceState::Failed) {
            return;
        }
        h.r.state = ToolInstanceState::Failed;
        self.collect(instance_id, slot);
        let ev = InterActivityEvent {
            event_id: Uuid::new_v4().to_string(),
            instance_id: instance_id.into(),
            slot_id: slot.into(),
            event_name: TOOL_FAILED_EVENT.into(),
            payload: json!({ "reason": reason }).as_object().cloned().unwrap_or_default(),
            actor: Some(user),
            emitted_seq: 0,
            depth: 1,
        };
        self.forward_event(ev);
        self.unsynced.insert(instance_id.into());
    }

    /// Moves a tool's emitted events to the outgoing queue, dropping any the
    /// tool never declared.
    fn collect(&mut self, instance_id: &str, slot: &str) {
        let Ok(h) = self.hosted(instance_id, slot) else { return };
        let emissions = h.sink.drain();
        let mut accepted = Vec::new();
        let mut dropped = Vec::new();
        for e in emissions {
            if h.descriptor.event(&e.event_name).is_some() {
                accepted.push(e);
            } else {
                dropped.push(e.event_name);
            }
        }
        for name in dropped {
            self.report(instance_id, "undeclared_event", &format!("{slot} emitted `{name}`"));
        }
        for e in accepted {
            self.forward_event(InterActivityEvent {
                event_id: Uuid::new_v4().to_string(),
                instance_id: instance_id.into(),
                slot_id: slot.into(),
                event_name: e.event_name,
                payload: e.payload,
                actor: e.actor,
                emitted_seq: 0,
                depth: e.depth,
            });
        }
    }

    fn collect_all(&mut self) {
        let keys: Vec<SlotKey> = self.tools.keys().cloned().collect();
        for (i, s) in keys {
            self.collect(&i, &s);
        }
    }

    fn report(&mut self, instance_id: &str, code: &str, detail: &str) {
        self.local_errors.push(format!("{code}: {detail}"));
        self.reports.push_back(ErrorReport {
            instance_id: instance_id.into(),
            code: code.into(),
            detail: detail.into(),
        });
    }

    /// Queues an event for the server. The queue is bounded; on overflow the
    /// oldest event is dropped and the loss reported.
    pub fn forward_event(&mut self, ev: InterActivityEvent) {
        if self.outgoing.len() >= self.config.event_queue_bound {
            if let Some(old) = self.outgoing.pop_front() {
                self.report(
                    &old.instance_id,
                    "event_queue_overflow",
                    &format!("dropped {} `{}`", old.event_id, old.event_name),
                );
            }
        }
        self.outgoing.push_back(ev);
    }

    /// Runs a command from the server. A command id seen before is not run
    /// again; the stored outcome is returned.
    pub fn handle_command(&mut self, cmd: &Command) -> CommandCompletion {
        let done = |outcome| CommandCompletion {
            command_id: cmd.command_id.clone(),
            instance_id: cmd.instance_id.clone(),
            outcome,
        };
        if let Some(previous) = self.completed.get(&cmd.command_id) {
            return done(previous.clone());
        }
        let outcome = match self.hosted(&cmd.instance_id, &cmd.slot_id) {
            Err(e) => CompletionOutcome::error(e.code(), e.to_string()),
            Ok(h) => {
                h.sink.set_depth(cmd.depth + 1);
                let result = self.invoke(&cmd.instance_id, &cmd.slot_id, &cmd.command_name, &cmd.args);
                if let Ok(h) = self.hosted(&cmd.instance_id, &cmd.slot_id) {
                    h.sink.set_depth(1);
                }
                match result {
                    Ok(result) => CompletionOutcome::Ok { result },
                    Err(e) => CompletionOutcome::error(e.code(), e.to_string()),
                }
            }
        };
        if self.completed.len() >= self.config.dedup_window {
            self.completed.shift_remove_index(0);
        }
        self.completed.insert(cmd.command_id.clone(), outcome.clone());
        done(outcome)
    }

    fn sync(&mut self, instance_id: &str) -> Result<(), HostError> {
        let instances = self
            .tools
            .iter()
            .filter(|((i, _), _)| i == instance_id)
            .map(|(_, h)| h.r.clone())
            .collect();
        self.call(
            MessageType::StateSync,
            &StateSync {
                instance_id: instance_id.into(),
                instances,
            },
        )?;
        self.unsynced.remove(instance_id);
        Ok(())
    }

    /// Exchanges everything pending with the server: error reports, state
    /// changes, events, then commands and their completions. Returns whether
    /// anything moved.
    pub fn pump(&mut self) -> Result<bool, HostError> {
        let mut progress = false;
        loop {
            self.collect_all();
            while let Some(r) = self.reports.front().cloned() {
                match self.call(MessageType::Error, &r) {
                    Ok(_) | Err(HostError::Server(_)) => {
                        self.reports.pop_front();
                        progress = true;
                    }
                    Err(e) => return Err(e),
                }
            }
            for instance_id in std::mem::take(&mut self.unsynced) {
                self.sync(&instance_id)?;
                progress = true;
            }
            // Events stay queued until the server has answered, so a resend
            // after a broken link carries the same event_id.
            while let Some(ev) = self.outgoing.front().cloned() {
                match self.call(MessageType::EventUp, &ev) {
                    Ok(_) => {}
                    Err(HostError::Server(r)) => {
                        self.local_errors.push(format!("event {} refused: {}", ev.event_id, r.detail))
                    }
                    Err(e) => return Err(e),
                }
                self.outgoing.pop_front();
                progress = true;
            }
            if self.inbox.is_empty() {
                self.call(
                    MessageType::Hello,
                    &Hello {
                        host_id: self.user_id.clone(),
                    },
                )?;
            }
            if self.inbox.is_empty() {
                return Ok(progress);
            }
            while let Some(cmd) = self.inbox.pop_front() {
                let completion = self.handle_command(&cmd);
                match self.call(MessageType::Completion, &completion) {
                    Ok(_) | Err(HostError::Server(_)) => {}
                    Err(e) => {
                        self.inbox.push_front(cmd);
                        return Err(e);
                    }
                }
                progress = true;
            }
        }
    }

    /// Sends one event immediately, bypassing the queue.
    pub fn send_event(&mut self, ev: &InterActivityEvent) -> Result<DispatchOutcome, HostError> {
        let v = self.call(MessageType::EventUp, ev)?;
        Ok(serde_json::from_value(v).map_err(|e| WireError::Malformed(e.to_string()))?)
    }

    pub fn shutdown_instance(&mut self, instance_id: &str) {
        for ((i, _), h) in self.tools.iter_mut() {
            if i == instance_id && h.r.state.can_become(ToolInstanceState::Stopped) {
                h.tool.shutdown();
                h.r.state = ToolInstanceState::Stopped;
            }
        }
        self.unsynced.insert(instance_id.into());
    }

    pub fn tool_state(&mut self, instance_id: &str, slot: &str) -> Option<Value> {
        self.hosted(instance_id, slot).ok().map(|h| h.tool.state())
    }

    pub fn refs(&self, instance_id: &str) -> Vec<ToolInstanceRef> {
        self.tools
            .iter()
            .filter(|((i, _), _)| i == instance_id)
            .map(|(_, h)| h.r.clone())
            .collect()
    }

    pub fn is_idle(&self) -> bool {
        self.inbox.is_empty() && self.outgoing.is_empty() && self.reports.is_empty() && self.unsynced.is_empty()
    }

    /// Number of tool invocations actually performed.
    pub fn invocations(&self) -> u64 {
        self.invocations
    }

    pub fn pending_events(&self) -> usize {
        self.outgoing.len()
    }

    pub fn local_errors(&self) -> &[String] {
        &self.local_errors
    }
}
