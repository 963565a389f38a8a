use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

/// Closed set of parameter and payload types understood by the platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SemanticType {
    String,
    Integer,
    Boolean,
    UserRef,
    RoleRef,
    Json,
}

impl SemanticType {
    pub fn admits(self, value: &Value) -> bool {
        match self {
            SemanticType::String | SemanticType::UserRef | SemanticType::RoleRef => {
                value.is_string()
            }
            SemanticType::Integer => value.is_i64() || value.is_u64(),
            SemanticType::Boolean => value.is_boolean(),
            SemanticType::Json => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SemanticType::String => "string",
            SemanticType::Integer => "integer",
            SemanticType::Boolean => "boolean",
            SemanticType::UserRef => "user-ref",
            SemanticType::RoleRef => "role-ref",
            SemanticType::Json => "json",
        }
    }
}

impl fmt::Display for SemanticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: SemanticType,
}

impl Param {
    pub fn new(name: impl Into<String>, ty: SemanticType) -> Self {
        Self { name: name.into(), ty }
    }
}

/// An operation a tool exposes on its client side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationSignature {
    pub name: String,
    pub params: Vec<Param>,
    /// `None` encodes a void return (`"void"` on the wire).
    #[serde(with = "returns_tag")]
    pub returns: Option<SemanticType>,
}

impl OperationSignature {
    pub fn new(name: impl Into<String>, params: Vec<Param>, returns: Option<SemanticType>) -> Self {
        Self {
            name: name.into(),
            params,
            returns,
        }
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Checks `args` against the declared parameters: every param present with
    /// an admissible value and nothing extra.
    pub fn check_args(&self, args: &Map<String, Value>) -> Result<(), String> {
        for p in &self.params {
            match args.get(&p.name) {
                None => return Err(format!("missing argument `{}`", p.name)),
                Some(v) if !p.ty.admits(v) => {
                    return Err(format!("argument `{}` is not a {}", p.name, p.ty))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = args.keys().find(|k| self.param(k).is_none()) {
            return Err(format!("unexpected argument `{extra}`"));
        }
        Ok(())
    }
}

mod returns_tag {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<SemanticType>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_str("void"),
            Some(t) => t.serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<SemanticType>, D::Error> {
        let raw = String::deserialize(d)?;
        if raw == "void" {
            return Ok(None);
        }
        SemanticType::deserialize(serde::de::value::StrDeserializer::<D::Error>::new(&raw)).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSignature {
    pub name: String,
    pub payload_schema: BTreeMap<String, SemanticType>,
}

impl EventSignature {
    pub fn new<I, K>(name: impl Into<String>, fields: I) -> Self
    where
        I: IntoIterator<Item = (K, SemanticType)>,
        K: Into<String>,
    {
        Self {
            name: name.into(),
            payload_schema: fields.into_iter().map(|(k, t)| (k.into(), t)).collect(),
        }
    }

    /// Every declared field present with the declared type, nothing undeclared.
    pub fn check_payload(&self, payload: &Map<String, Value>) -> Result<(), String> {
        for (field, ty) in &self.payload_schema {
            match payload.get(field) {
                None => return Err(format!("payload field `{field}` missing")),
                Some(v) if !ty.admits(v) => {
                    return Err(format!("payload field `{field}` is not a {ty}"))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = payload.keys().find(|k| !self.payload_schema.contains_key(*k)) {
            return Err(format!("payload field `{extra}` not declared"));
        }
        Ok(())
    }
}

/// Name of the synthetic event a host raises when a tool instance fails.
/// Accepted for every slot without being declared.
pub const TOOL_FAILED_EVENT: &str = "tool_failed";

/// A tool's filtered integration surface plus identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub tool_id: String,
    pub version: String,
    pub activity_kind: String,
    pub commands: Vec<OperationSignature>,
    pub events: Vec<EventSignature>,
    pub roles: Vec<String>,
    pub artifact_hash: String,
}

impl ToolDescriptor {
    pub fn command(&self, name: &str) -> Option<&OperationSignature> {
        self.commands.iter().find(|c| c.name == name)
    }

    pub fn event(&self, name: &str) -> Option<&EventSignature> {
        self.events.iter().find(|e| e.name == name)
    }

    /// Declared events plus the implicit failure event.
    pub fn accepts_event(&self, name: &str) -> bool {
        name == TOOL_FAILED_EVENT || self.event(name).is_some()
    }

    pub fn has_role(&self, role: &str) -> bool {
        self.roles.iter().any(|r| r == role)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubActivitySlot {
    pub slot_id: String,
    pub tool_url: String,
    #[serde(default)]
    pub instance_params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleMapping {
    pub parent_role: String,
    pub slot_id: String,
    pub sub_role: String,
}

impl RoleMapping {
    pub fn new(parent_role: &str, slot_id: &str, sub_role: &str) -> Self {
        Self {
            parent_role: parent_role.into(),
            slot_id: slot_id.into(),
            sub_role: sub_role.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Trigger {
    ToolEvent { slot_id: String, event_name: String },
    PhaseEntered { phase: String },
}

impl Trigger {
    pub fn tool_event(slot_id: &str, event_name: &str) -> Self {
        Trigger::ToolEvent {
            slot_id: slot_id.into(),
            event_name: event_name.into(),
        }
    }

    pub fn phase_entered(phase: &str) -> Self {
        Trigger::PhaseEntered {
            phase: phase.into(),
        }
    }
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trigger::ToolEvent {
                slot_id,
                event_name,
            } => write!(f, "{slot_id}.{event_name}"),
            Trigger::PhaseEntered { phase } => write!(f, "PhaseEntered({phase})"),
        }
    }
}

/// Left-hand side of a guard atom: the current phase or a payload field path.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum GuardSubject {
    Phase,
    Field(String),
}

impl GuardSubject {
    pub const PHASE: &'static str = "$phase";
}

impl Serialize for GuardSubject {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            GuardSubject::Phase => s.serialize_str(Self::PHASE),
            GuardSubject::Field(path) => s.serialize_str(path),
        }
    }
}

impl<'de> Deserialize<'de> for GuardSubject {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        if raw == Self::PHASE {
            Ok(GuardSubject::Phase)
        } else if raw.is_empty() || raw.starts_with('$') {
            Err(serde::de::Error::custom(format!("invalid guard subject `{raw}`")))
        } else {
            Ok(GuardSubject::Field(raw))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CompareOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">")]
    Gt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardAtom {
    pub subject: GuardSubject,
    pub op: CompareOp,
    pub value: Value,
}

impl GuardAtom {
    pub fn phase_is(phase: &str) -> Self {
        Self {
            subject: GuardSubject::Phase,
            op: CompareOp::Eq,
            value: Value::String(phase.into()),
        }
    }

    pub fn field(path: &str, op: CompareOp, value: Value) -> Self {
        Self {
            subject: GuardSubject::Field(path.into()),
            op,
            value,
        }
    }
}

/// Conjunction of atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guard {
    pub atoms: Vec<GuardAtom>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "from", rename_all = "snake_case")]
pub enum ArgSource {
    Literal { value: Value },
    Payload { path: String },
    Actor,
    Role,
}

impl ArgSource {
    pub fn literal(value: impl Into<Value>) -> Self {
        ArgSource::Literal {
            value: value.into(),
        }
    }

    pub fn payload(path: &str) -> Self {
        ArgSource::Payload { path: path.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    InvokeCommand {
        slot_id: String,
        command_name: String,
        #[serde(default)]
        arg_map: BTreeMap<String, ArgSource>,
    },
    TransitionPhase {
        target_phase: String,
    },
}

impl Action {
    pub fn invoke(slot_id: &str, command_name: &str) -> Self {
        Action::InvokeCommand {
            slot_id: slot_id.into(),
            command_name: command_name.into(),
            arg_map: BTreeMap::new(),
        }
    }

    pub fn invoke_with<I>(slot_id: &str, command_name: &str, args: I) -> Self
    where
        I: IntoIterator<Item = (&'static str, ArgSource)>,
    {
        Action::InvokeCommand {
            slot_id: slot_id.into(),
            command_name: command_name.into(),
            arg_map: args.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn transition(target_phase: &str) -> Self {
        Action::TransitionPhase {
            target_phase: target_phase.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    pub binding_id: String,
    pub source: Trigger,
    #[serde(default)]
    pub guard: Option<Guard>,
    pub actions: Vec<Action>,
}

impl Binding {
    pub fn new(binding_id: &str, source: Trigger, actions: Vec<Action>) -> Self {
        Self {
            binding_id: binding_id.into(),
            source,
            guard: None,
            actions,
        }
    }

    pub fn with_guard(mut self, atoms: Vec<GuardAtom>) -> Self {
        self.guard = Some(Guard { atoms });
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityDefinition {
    pub definition_id: String,
    pub kind: String,
    pub phases: Vec<String>,
    pub initial_phase: String,
    pub roles: Vec<String>,
    #[serde(default)]
    pub sub_activities: Vec<SubActivitySlot>,
    #[serde(default)]
    pub role_mappings: Vec<RoleMapping>,
    #[serde(default)]
    pub bindings: Vec<Binding>,
}

impl ActivityDefinition {
    pub fn slot(&self, slot_id: &str) -> Option<&SubActivitySlot> {
        self.sub_activities.iter().find(|s| s.slot_id == slot_id)
    }

    pub fn has_phase(&self, phase: &str) -> bool {
        self.phases.iter().any(|p| p == phase)
    }

    pub fn has_role(&self, role: &str) -> bool {
        self.roles.iter().any(|r| r == role)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolInstanceState {
    Starting,
    Running,
    Stopped,
    Failed,
}

impl ToolInstanceState {
    /// `starting -> running -> stopped | failed`; a starting instance may also fail.
    pub fn can_become(self, next: ToolInstanceState) -> bool {
        use ToolInstanceState::*;
        matches!(
            (self, next),
            (Starting, Running) | (Starting, Failed) | (Running, Stopped) | (Running, Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolInstanceRef {
    pub handle_id: String,
    pub slot_id: String,
    pub tool_id: String,
    pub state: ToolInstanceState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityInstance {
    pub instance_id: String,
    pub definition: ActivityDefinition,
    pub phase: String,
    pub participants: BTreeMap<String, String>,
    pub sub_instances: BTreeMap<String, ToolInstanceRef>,
    pub live_bindings: Vec<Binding>,
    pub seq: u64,
}

impl ActivityInstance {
    /// Definition bindings first, then live ones in addition order.
    pub fn bindings(&self) -> impl Iterator<Item = &Binding> {
        self.definition.bindings.iter().chain(self.live_bindings.iter())
    }
}

fn default_depth() -> u32 {
    1
}

/// The upward message: a tool event relayed by a host to the activity server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterActivityEvent {
    pub event_id: String,
    pub instance_id: String,
    pub slot_id: String,
    pub event_name: String,
    pub payload: Map<String, Value>,
    pub actor: Option<String>,
    #[serde(default)]
    pub emitted_seq: u64,
    /// Cascade depth: 1 for user-originated events, `command.depth + 1` for
    /// events a tool raised while executing a command.
    #[serde(default = "default_depth")]
    pub depth: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausedBy {
    Event(String),
    Phase(String),
}

/// The downward message: an invocation the server asks a host to perform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub command_id: String,
    pub instance_id: String,
    pub slot_id: String,
    pub command_name: String,
    pub args: Map<String, Value>,
    pub caused_by: CausedBy,
    pub depth: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CompletionOutcome {
    Ok { result: Value },
    Error { code: String, detail: String },
}

impl CompletionOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, CompletionOutcome::Ok { .. })
    }

    pub fn error(code: &str, detail: impl Into<String>) -> Self {
        CompletionOutcome::Error {
            code: code.into(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandCompletion {
    pub command_id: String,
    pub instance_id: String,
    pub outcome: CompletionOutcome,
}
