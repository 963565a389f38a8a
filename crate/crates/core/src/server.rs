//! The activity server: owns instances, sequences their inputs, evaluates
//! bindings and routes the resulting commands to the hosts that run the
//! target tools.
//!
//! Every mutation of an instance goes through its own mutex, so each trace is
//! a total order. Commands wait in a per-host outbox until that host next
//! talks to the server.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::engine::{evaluate, EvalScope, Effect, SkipNote, TriggerOccurrence, MAX_CASCADE_DEPTH};
use crate::model::{
    map_roles, validate_activity_definition, validate_binding, validate_with_tools,
    ActivityDefinition, ActivityInstance, Binding, CausedBy, Command, CommandCompletion,
    ErrorOrigin, InterActivityEvent, PhaseCause, ToolDescriptor, ToolInstanceRef,
    ToolInstanceState, Trace, TraceEntry, TraceKind, Trigger, Violation, ViolationKind,
    TOOL_FAILED_EVENT,
};
use crate::registry::{now_ms, ToolRegistry};

const COMMAND_NAMESPACE: Uuid = Uuid::from_u128(0x6c1d_44c5_0b7e_4a8e_9d1f_2f0c_a3e1_7b55);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerConfig {
    pub max_cascade_depth: u32,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            max_cascade_depth: MAX_CASCADE_DEPTH,
        }
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("invalid definition: {}", list(.0))]
    InvalidDefinition(Vec<Violation>),
    #[error("unknown role `{0}`")]
    UnknownRole(String),
    #[error("user `{0}` already joined")]
    AlreadyJoined(String),
    #[error("user `{0}` has not joined")]
    NotJoined(String),
    #[error("malformed event: {0}")]
    MalformedEvent(String),
    #[error("unknown phase `{0}`")]
    UnknownPhase(String),
    #[error("invalid binding: {}", list(.0))]
    InvalidBinding(Vec<Violation>),
    #[error("unknown binding `{0}`")]
    UnknownBinding(String),
    #[error("unknown command `{0}`")]
    UnknownCommand(String),
    #[error("cascade depth limit exceeded")]
    CascadeDepthExceeded(Box<DispatchOutcome>),
}

impl ServerError {
    pub fn code(&self) -> &'static str {
        match self {
            ServerError::UnknownInstance(_) => "unknown_instance",
            ServerError::InvalidDefinition(_) => "invalid_definition",
            ServerError::UnknownRole(_) => "unknown_role",
            ServerError::AlreadyJoined(_) => "already_joined",
            ServerError::NotJoined(_) => "not_joined",
            ServerError::MalformedEvent(_) => "malformed_event",
            ServerError::UnknownPhase(_) => "unknown_phase",
            ServerError::InvalidBinding(_) => "invalid_binding",
            ServerError::UnknownBinding(_) => "unknown_binding",
            ServerError::UnknownCommand(_) => "unknown_command",
            ServerError::CascadeDepthExceeded(_) => "cascade_depth_exceeded",
        }
    }

    pub fn violations(&self) -> &[Violation] {
        match self {
            ServerError::InvalidDefinition(v) | ServerError::InvalidBinding(v) => v,
            _ => &[],
        }
    }
}

fn list(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubGrant {
    pub slot_id: String,
    pub tool_url: String,
    pub artifact_hash: String,
    pub sub_role: Option<String>,
    #[serde(default)]
    pub instance_params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinGrant {
    pub instance_id: String,
    pub assigned_parent_role: String,
    pub sub_grants: Vec<SubGrant>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseChange {
    pub seq: u64,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DispatchOutcome {
    /// Seq assigned to the input; `None` for a duplicate that was ignored.
    pub seq: Option<u64>,
    pub duplicate: bool,
    pub commands: Vec<Command>,
    pub phase_changes: Vec<PhaseChange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityState {
    pub instance_id: String,
    pub definition_id: String,
    pub phase: String,
    pub participants: BTreeMap<String, String>,
    pub live_bindings: Vec<Binding>,
    pub sub_instances: BTreeMap<String, ToolInstanceRef>,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub instance_id: String,
    pub definition_id: String,
    pub phase: String,
    pub seq: u64,
}

/// Called with the instance id, index and value of every trace entry as it
/// is appended.
pub type TraceObserver = Arc<dyn Fn(&str, usize, &TraceEntry) + Send + Sync>;

struct Cell {
    instance: ActivityInstance,
    descriptors: BTreeMap<String, ToolDescriptor>,
    hashes: BTreeMap<String, String>,
    trace: Vec<TraceEntry>,
    seen_events: HashSet<String>,
    dispatched: HashMap<String, Command>,
    completed: HashSet<String>,
    /// Per slot, the hosts running it in join order.
    owners: BTreeMap<String, Vec<(String, ToolInstanceRef)>>,
    /// Commands for slots nobody runs yet.
    parked: BTreeMap<String, VecDeque<Command>>,
}

struct Pending {
    trigger: TriggerOccurrence,
    parent_seq: Option<u64>,
    seq: Option<u64>,
    cause: CausedBy,
}

pub struct ActivityServer {
    registry: Arc<ToolRegistry>,
    config: ServerConfig,
    instances: RwLock<BTreeMap<String, Arc<Mutex<Cell>>>>,
    next_id: AtomicU64,
    outboxes: Mutex<BTreeMap<String, VecDeque<Command>>>,
    observers: RwLock<Vec<TraceObserver>>,
}

impl std::fmt::Debug for ActivityServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ActivityServer")
            .field("config", &self.config)
            .field("instances", &self.instances.read().unwrap().keys().collect::<Vec<_>>())
            .finish()
    }
}

impl ActivityServer {
    pub fn new(registry: Arc<ToolRegistry>, config: ServerConfig) -> Self {
        Self {
            registry,
            config,
            instances: RwLock::default(),
            next_id: AtomicU64::new(1),
            outboxes: Mutex::default(),
            observers: RwLock::default(),
        }
    }

    pub fn registry(&self) -> &Arc<ToolRegistry> {
        &self.registry
    }

    pub fn config(&self) -> ServerConfig {
        self.config
    }

    pub fn observe(&self, observer: TraceObserver) {
        self.observers.write().unwrap().push(observer);
    }

    fn cell(&self, instance_id: &str) -> Result<Arc<Mutex<Cell>>, ServerError> {
        self.instances
            .read()
            .unwrap()
            .get(instance_id)
            .cloned()
            .ok_or_else(|| ServerError::UnknownInstance(instance_id.into()))
    }

    fn record(&self, cell: &mut Cell, seq: u64, kind: TraceKind) {
        let entry = TraceEntry {
            seq,
            time_ms: now_ms(),
            kind,
        };
        for o in self.observers.read().unwrap().iter() {
            o(&cell.instance.instance_id, cell.trace.len(), &entry);
        }
        cell.trace.push(entry);
    }

    pub fn create_activity(&self, def: ActivityDefinition) -> Result<String, ServerError> {
        let structural = validate_activity_definition(&def);
        if !structural.is_empty() {
            return Err(ServerError::InvalidDefinition(structural));
        }
        let mut descriptors = BTreeMap::new();
        let mut hashes = BTreeMap::new();
        let mut unresolved = Vec::new();
        for slot in &def.sub_activities {
            match self.registry.resolve(&slot.tool_url) {
                Ok(tool) => {
                    hashes.insert(slot.slot_id.clone(), tool.artifact.artifact_hash.clone());
                    descriptors.insert(slot.slot_id.clone(), tool.descriptor);
                }
                Err(e) => unresolved.push(Violation {
                    field: format!("sub_activities[{}].tool_url", slot.slot_id),
                    kind: ViolationKind::UnresolvedTool {
                        slot_id: slot.slot_id.clone(),
                        reason: e.to_string(),
                    },
                }),
            }
        }
        if !unresolved.is_empty() {
            return Err(ServerError::InvalidDefinition(unresolved));
        }
        let violations = validate_with_tools(&def, &descriptors);
        if !violations.is_empty() {
            return Err(ServerError::InvalidDefinition(violations));
        }

        let instance_id = format!("act-{}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let mut cell = Cell {
            instance: ActivityInstance {
                instance_id: instance_id.clone(),
                phase: def.initial_phase.clone(),
                definition: def.clone(),
                participants: BTreeMap::new(),
                sub_instances: BTreeMap::new(),
                live_bindings: Vec::new(),
                seq: 0,
            },
            descriptors,
            hashes,
            trace: Vec::new(),
            seen_events: HashSet::new(),
            dispatched: HashMap::new(),
            completed: HashSet::new(),
            owners: BTreeMap::new(),
            parked: BTreeMap::new(),
        };
        self.record(&mut cell, 0, TraceKind::InstanceCreated { definition: def });
        tracing::debug!(%instance_id, "instance created");
        self.instances
            .write()
            .unwrap()
            .insert(instance_id.clone(), Arc::new(Mutex::new(cell)));
        Ok(instance_id)
    }

    pub fn list(&self) -> Vec<InstanceSummary> {
        let cells: Vec<_> = self.instances.read().unwrap().values().cloned().collect();
        cells
            .iter()
            .map(|c| {
                let c = c.lock().unwrap();
                InstanceSummary {
                    instance_id: c.instance.instance_id.clone(),
                    definition_id: c.instance.definition.definition_id.clone(),
                    phase: c.instance.phase.clone(),
                    seq: c.instance.seq,
                }
            })
            .collect()
    }

    pub fn join(&self, instance_id: &str, user_id: &str, role: &str) -> Result<JoinGrant, ServerError> {
        let cell = self.cell(instance_id)?;
        let mut c = cell.lock().unwrap();
        if !c.instance.definition.has_role(role) {
            return Err(ServerError::UnknownRole(role.into()));
        }
        if c.instance.participants.contains_key(user_id) {
            return Err(ServerError::AlreadyJoined(user_id.into()));
        }
        c.instance.participants.insert(user_id.into(), role.into());
        let seq = c.instance.seq;
        self.record(
            &mut c,
            seq,
            TraceKind::ParticipantJoined {
                user_id: user_id.into(),
                role: role.into(),
            },
        );
        let roles = map_roles(&c.instance.definition.role_mappings, role);
        let sub_grants = c
            .instance
            .definition
            .sub_activities
            .iter()
            .map(|s| SubGrant {
                slot_id: s.slot_id.clone(),
                tool_url: s.tool_url.clone(),
                artifact_hash: c.hashes[&s.slot_id].clone(),
                sub_role: roles.get(&s.slot_id).cloned(),
                instance_params: s.instance_params.clone(),
            })
            .collect();
        Ok(JoinGrant {
            instance_id: instance_id.into(),
            assigned_parent_role: role.into(),
            sub_grants,
        })
    }

    fn check_event(c: &Cell, ev: &InterActivityEvent) -> Result<(), ServerError> {
        let bad = |m: String| Err(ServerError::MalformedEvent(m));
        if ev.event_id.is_empty() {
            return bad("empty event_id".into());
        }
        let Some(d) = c.descriptors.get(&ev.slot_id) else {
            return bad(format!("unknown slot `{}`", ev.slot_id));
        };
        if ev.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if ev.event_name == TOOL_FAILED_EVENT {
            return Ok(());
        }
        match d.event(&ev.event_name) {
            None => bad(format!("`{}` does not declare `{}`", ev.slot_id, ev.event_name)),
            Some(sig) => sig.check_payload(&ev.payload).map_err(ServerError::MalformedEvent),
        }
    }

    pub fn receive_event(&self, mut ev: InterActivityEvent) -> Result<DispatchOutcome, ServerError> {
        let cell = self.cell(&ev.instance_id)?;
        let mut c = cell.lock().unwrap();
        if c.seen_events.contains(&ev.event_id) {
            return Ok(DispatchOutcome {
                duplicate: true,
                ..Default::default()
            });
        }
        Self::check_event(&c, &ev)?;
        c.seen_events.insert(ev.event_id.clone());
        c.instance.seq += 1;
        let seq = c.instance.seq;
        ev.emitted_seq = seq;
        let pending = Pending {
            trigger: TriggerOccurrence {
                source: Trigger::tool_event(&ev.slot_id, &ev.event_name),
                payload: ev.payload.clone(),
                actor: ev.actor.clone(),
                depth: ev.depth,
            },
            parent_seq: None,
            seq: Some(seq),
            cause: CausedBy::Event(ev.event_id.clone()),
        };
        self.record(&mut c, seq, TraceKind::EventReceived { event: ev });
        let mut out = DispatchOutcome {
            seq: Some(seq),
            ..Default::default()
        };
        self.cascade(&mut c, pending, &mut out)?;
        Ok(out)
    }

    /// Drives one trigger and everything it causes, breadth first.
    fn cascade(&self, c: &mut Cell, first: Pending, out: &mut DispatchOutcome) -> Result<(), ServerError> {
        let mut queue = VecDeque::from([first]);
        while let Some(p) = queue.pop_front() {
            let seq = match p.seq {
                Some(s) => s,
                None => {
                    c.instance.seq += 1;
                    c.instance.seq
                }
            };
            let scope = EvalScope::of(&c.instance, self.config.max_cascade_depth);
            let effects = match evaluate(&scope, &p.trigger) {
                Ok(e) => e,
                Err(e) => {
                    tracing::warn!(instance = %c.instance.instance_id, "{e}");
                    self.record(
                        c,
                        seq,
                        TraceKind::Error {
                            origin: ErrorOrigin::Server,
                            code: "cascade_depth_exceeded".into(),
                            detail: format!("{} at depth {}: {e}", p.trigger.source, p.trigger.depth),
                        },
                    );
                    return Err(ServerError::CascadeDepthExceeded(Box::new(std::mem::take(out))));
                }
            };
            for ev in &effects.evaluations {
                self.record(
                    c,
                    seq,
                    TraceKind::GuardEvaluated {
                        binding_id: ev.binding_id.clone(),
                        trigger: p.trigger.source.clone(),
                        depth: p.trigger.depth,
                        passed: ev.passed,
                        parent_seq: p.parent_seq,
                        note: ev.note.clone(),
                    },
                );
            }
            for skip in &effects.skipped {
                if let SkipNote::ArgResolutionFailed {
                    binding_id,
                    action_index,
                    path,
                } = skip
                {
                    self.record(
                        c,
                        seq,
                        TraceKind::Error {
                            origin: ErrorOrigin::Server,
                            code: "arg_resolution_failed".into(),
                            detail: format!("{binding_id} action {action_index}: `{path}` missing"),
                        },
                    );
                }
            }
            let mut n = 0;
            for effect in effects.effects {
                match effect {
                    Effect::TransitionPhase {
                        binding_id,
                        target_phase,
                    } => {
                        if let Some(change) =
                            self.apply_phase(c, seq, &target_phase, PhaseCause::Binding(binding_id))
                        {
                            out.phase_changes.push(change);
                            queue.push_back(Pending {
                                trigger: TriggerOccurrence::phase_entered(&target_phase, p.trigger.depth + 1),
                                parent_seq: Some(seq),
                                seq: None,
                                cause: CausedBy::Phase(target_phase),
                            });
                        }
                    }
                    Effect::InvokeCommand {
                        binding_id,
                        slot_id,
                        command_name,
                        args,
                    } => {
                        let name = format!("{}/{seq}/{n}", c.instance.instance_id);
                        n += 1;
                        let command = Command {
                            command_id: Uuid::new_v5(&COMMAND_NAMESPACE, name.as_bytes()).to_string(),
                            instance_id: c.instance.instance_id.clone(),
                            slot_id,
                            command_name,
                            args,
                            caused_by: p.cause.clone(),
                            depth: p.trigger.depth,
                        };
                        self.record(
                            c,
                            seq,
                            TraceKind::CommandDispatched {
                                binding_id,
                                command: command.clone(),
                            },
                        );
                        c.dispatched.insert(command.command_id.clone(), command.clone());
                        self.route(c, command.clone());
                        out.commands.push(command);
                    }
                }
            }
        }
        Ok(())
    }

    fn apply_phase(&self, c: &mut Cell, seq: u64, target: &str, cause: PhaseCause) -> Option<PhaseChange> {
        if c.instance.phase == target {
            return None;
        }
        let from = std::mem::replace(&mut c.instance.phase, target.to_string());
        self.record(
            c,
            seq,
            TraceKind::PhaseChanged {
                from: from.clone(),
                to: target.into(),
                cause,
            },
        );
        Some(PhaseChange {
            seq,
            from,
            to: target.into(),
        })
    }

    /// The first host (in join order) with a running instance of the slot
    /// executes commands for it.
    fn controller(c: &Cell, slot_id: &str) -> Option<String> {
        c.owners
            .get(slot_id)?
            .iter()
            .find(|(_, r)| r.state == ToolInstanceState::Running)
            .map(|(host, _)| host.clone())
    }

    fn route(&self, c: &mut Cell, command: Command) {
        match Self::controller(c, &command.slot_id) {
            Some(host) => self
                .outboxes
                .lock()
                .unwrap()
                .entry(host)
                .or_default()
                .push_back(command),
            None => c.parked.entry(command.slot_id.clone()).or_default().push_back(command),
        }
    }

    pub fn transition_phase(&self, instance_id: &str, target: &str, cause: &str) -> Result<DispatchOutcome, ServerError> {
        let cell = self.cell(instance_id)?;
        let mut c = cell.lock().unwrap();
        if !c.instance.definition.has_phase(target) {
            return Err(ServerError::UnknownPhase(target.into()));
        }
        let mut out = DispatchOutcome::default();
        if c.instance.phase == target {
            return Ok(out);
        }
        c.instance.seq += 1;
        let seq = c.instance.seq;
        out.seq = Some(seq);
        let change = self
            .apply_phase(&mut c, seq, target, PhaseCause::External(cause.into()))
            .expect("phase differs");
        out.phase_changes.push(change);
        let pending = Pending {
            trigger: TriggerOccurrence::phase_entered(target, 1),
            parent_seq: Some(seq),
            seq: None,
            cause: CausedBy::Phase(target.into()),
        };
        self.cascade(&mut c, pending, &mut out)?;
        Ok(out)
    }

    /// Records a host's completion. Completions for unknown commands are
    /// rejected; repeated completions are accepted and ignored.
    pub fn complete_command(&self, completion: CommandCompletion) -> Result<bool, ServerError> {
        let cell = self.cell(&completion.instance_id)?;
        let mut c = cell.lock().unwrap();
        let Some(cmd) = c.dispatched.get(&completion.command_id).cloned() else {
            return Err(ServerError::UnknownCommand(completion.command_id));
        };
        if !c.completed.insert(completion.command_id.clone()) {
            return Ok(false);
        }
        let seq = c.instance.seq;
        self.record(
            &mut c,
            seq,
            TraceKind::CommandCompleted {
                command_id: cmd.command_id,
                slot_id: cmd.slot_id,
                command_name: cmd.command_name,
                outcome: completion.outcome,
            },
        );
        Ok(true)
    }

    pub fn add_live_binding(&self, instance_id: &str, binding: Binding) -> Result<String, ServerError> {
        let cell = self.cell(instance_id)?;
        let mut c = cell.lock().unwrap();
        let mut violations = validate_binding(&c.instance.definition, Some(&c.descriptors), &binding);
        if c.instance.bindings().any(|b| b.binding_id == binding.binding_id) {
            violations.push(Violation {
                field: "binding_id".into(),
                kind: ViolationKind::DuplicateBindingId(binding.binding_id.clone()),
            });
        }
        if !violations.is_empty() {
            return Err(ServerError::InvalidBinding(violations));
        }
        let id = binding.binding_id.clone();
        c.instance.live_bindings.push(binding.clone());
        let seq = c.instance.seq;
        self.record(&mut c, seq, TraceKind::BindingAdded { binding });
        Ok(id)
    }

    pub fn remove_live_binding(&self, instance_id: &str, binding_id: &str) -> Result<(), ServerError> {
        let cell = self.cell(instance_id)?;
        let mut c = cell.lock().unwrap();
        let Some(pos) = c.instance.live_bindings.iter().position(|b| b.binding_id == binding_id) else {
            return Err(ServerError::UnknownBinding(binding_id.into()));
        };
        c.instance.live_bindings.remove(pos);
        let seq = c.instance.seq;
        self.record(
            &mut c,
            seq,
            TraceKind::BindingRemoved {
                binding_id: binding_id.into(),
            },
        );
        Ok(())
    }

    /// A host reports the state of its tool instances for one activity.
    /// Parked commands move to the host that now controls their slot.
    pub fn sync_host(&self, instance_id: &str, host_id: &str, refs: Vec<ToolInstanceRef>) -> Result<ActivityState, ServerError> {
        let cell = self.cell(instance_id)?;
        let mut c = cell.lock().unwrap();
        if !c.instance.participants.contains_key(host_id) {
            return Err(ServerError::NotJoined(host_id.into()));
        }
        for r in refs {
            if !c.descriptors.contains_key(&r.slot_id) {
                continue;
            }
            let owners = c.owners.entry(r.slot_id.clone()).or_default();
            match owners.iter_mut().find(|(h, _)| h == host_id) {
                Some((_, existing)) => *existing = r,
                None => owners.push((host_id.into(), r)),
            }
        }
        let slots: Vec<String> = c.owners.keys().cloned().collect();
        for slot in slots {
            let ctl = Self::controller(&c, &slot);
            let slot_ref = c.owners[&slot]
                .iter()
                .find(|(h, _)| Some(h) == ctl.as_ref())
                .or_else(|| c.owners[&slot].first())
                .map(|(_, r)| r.clone());
            if let Some(r) = slot_ref {
                c.instance.sub_instances.insert(slot.clone(), r);
            }
            if let Some(host) = ctl {
                if let Some(parked) = c.parked.remove(&slot) {
                    self.outboxes.lock().unwrap().entry(host).or_default().extend(parked);
                }
            }
        }
        Ok(Self::state_of(&c))
    }

    /// Records an error a host observed locally (dropped or undeclared events).
    pub fn report_host_error(&self, instance_id: &str, code: &str, detail: &str) -> Result<(), ServerError> {
        let cell = self.cell(instance_id)?;
        let mut c = cell.lock().unwrap();
        let seq = c.instance.seq;
        self.record(
            &mut c,
            seq,
            TraceKind::Error {
                origin: ErrorOrigin::Host,
                code: code.into(),
                detail: detail.into(),
            },
        );
        Ok(())
    }

    /// Commands waiting for `host_id`, oldest first.
    pub fn take_commands(&self, host_id: &str) -> Vec<Command> {
        self.outboxes
            .lock()
            .unwrap()
            .get_mut(host_id)
            .map(|q| q.drain(..).collect())
            .unwrap_or_default()
    }

    /// Whether any command is still waiting for a host.
    pub fn has_pending_commands(&self) -> bool {
        self.outboxes.lock().unwrap().values().any(|q| !q.is_empty())
    }

    fn state_of(c: &Cell) -> ActivityState {
        ActivityState {
            instance_id: c.instance.instance_id.clone(),
            definition_id: c.instance.definition.definition_id.clone(),
            phase: c.instance.phase.clone(),
            participants: c.instance.participants.clone(),
            live_bindings: c.instance.live_bindings.clone(),
            sub_instances: c.instance.sub_instances.clone(),
            seq: c.instance.seq,
        }
    }

    pub fn snapshot(&self, instance_id: &str) -> Result<ActivityState, ServerError> {
        let cell = self.cell(instance_id)?;
        let c = cell.lock().unwrap();
        Ok(Self::state_of(&c))
    }

    pub fn definition(&self, instance_id: &str) -> Result<ActivityDefinition, ServerError> {
        Ok(self.cell(instance_id)?.lock().unwrap().instance.definition.clone())
    }

    pub fn descriptors(&self, instance_id: &str) -> Result<BTreeMap<String, ToolDescriptor>, ServerError> {
        Ok(self.cell(instance_id)?.lock().unwrap().descriptors.clone())
    }

    pub fn trace(&self, instance_id: &str) -> Result<Trace, ServerError> {
        let cell = self.cell(instance_id)?;
        let c = cell.lock().unwrap();
        Ok(Trace {
            instance_id: instance_id.into(),
            entries: c.trace.clone(),
        })
    }

    /// Trace entries from index `from` on; used by stream consumers resuming
    /// after a disconnect.
    pub fn trace_since(&self, instance_id: &str, from: usize) -> Result<Vec<TraceEntry>, ServerError> {
        let cell = self.cell(instance_id)?;
        let c = cell.lock().unwrap();
        Ok(c.trace.get(from..).map(<[_]>::to_vec).unwrap_or_default())
    }
}
