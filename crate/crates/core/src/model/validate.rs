use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::types::{
    Action, ActivityDefinition, ArgSource, Binding, EventSignature, GuardSubject,
    OperationSignature, ToolDescriptor, Trigger, TOOL_FAILED_EVENT,
};

static INTEGRATION_NAME: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^ia_[a-z][a-z0-9_]*$").unwrap());
static TOOL_ID: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[a-z][a-z0-9]*(-[a-z0-9]+)*$").unwrap());

/// Naming convention for the integration surface: `ia_` followed by lowercase
/// snake case.
pub fn is_integration_name(name: &str) -> bool {
    INTEGRATION_NAME.is_match(name)
}

pub fn is_tool_id(id: &str) -> bool {
    TOOL_ID.is_match(id)
}

/// Accepted slot URL schemes: plain web servers and in-process registrations.
pub fn is_tool_url(raw: &str) -> bool {
    match url::Url::parse(raw) {
        Ok(u) => match u.scheme() {
            "http" | "https" => u.has_host(),
            "local" => is_tool_id(u.path()),
            _ => false,
        },
        Err(_) => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "detail", rename_all = "snake_case")]
pub enum ViolationKind {
    EmptyPhases,
    DuplicatePhase(String),
    InitialPhaseMissing,
    DuplicateRole(String),
    DuplicateSlot(String),
    InvalidToolUrl(String),
    UnknownRole(String),
    UnknownSlot(String),
    DuplicateRoleMapping { parent_role: String, slot_id: String },
    DuplicateBindingId(String),
    EmptyActions,
    UnknownPhase(String),
    UnresolvedTool { slot_id: String, reason: String },
    UnknownSubRole { slot_id: String, role: String },
    UnknownEvent { slot_id: String, event_name: String },
    UnknownCommand { slot_id: String, command_name: String },
    MissingArg { command_name: String, param: String },
    UnexpectedArg { command_name: String, param: String },
    ArgTypeMismatch { param: String, expected: String },
    UnknownPayloadField(String),
    InvalidGuardField(String),
}

/// A broken invariant, located by the path of the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?}", self.field, self.kind)
    }
}

/// Structural validation of a definition on its own.
///
/// Checks phases, roles, slots, role mappings and the referential closure of
/// bindings over slots and phases. Command, event and sub-role names need the
/// tools' descriptors; see [`validate_with_tools`].
pub fn validate_activity_definition(def: &ActivityDefinition) -> Vec<Violation> {
    Validator::new(def, None).run()
}

/// Full validation: structure plus every reference into the slots' tool
/// descriptors (keyed by slot id).
pub fn validate_with_tools(
    def: &ActivityDefinition,
    tools: &BTreeMap<String, ToolDescriptor>,
) -> Vec<Violation> {
    Validator::new(def, Some(tools)).run()
}

/// Validates one binding against a definition, e.g. before adding it live.
pub fn validate_binding(
    def: &ActivityDefinition,
    tools: Option<&BTreeMap<String, ToolDescriptor>>,
    binding: &Binding,
) -> Vec<Violation> {
    let mut v = Validator::new(def, tools);
    v.binding(binding, &format!("binding[{}]", binding.binding_id));
    v.out
}

struct Validator<'a> {
    def: &'a ActivityDefinition,
    tools: Option<&'a BTreeMap<String, ToolDescriptor>>,
    out: Vec<Violation>,
}

impl<'a> Validator<'a> {
    fn new(def: &'a ActivityDefinition, tools: Option<&'a BTreeMap<String, ToolDescriptor>>) -> Self {
        Self {
            def,
            tools,
            out: Vec::new(),
        }
    }

    fn push(&mut self, field: impl Into<String>, kind: ViolationKind) {
        self.out.push(Violation {
            field: field.into(),
            kind,
        });
    }

    fn run(mut self) -> Vec<Violation> {
        let def = self.def;
        if def.phases.is_empty() {
            self.push("phases", ViolationKind::EmptyPhases);
        }
        let mut seen = HashSet::new();
        for p in &def.phases {
            if !seen.insert(p.as_str()) {
                self.push("phases", ViolationKind::DuplicatePhase(p.clone()));
            }
        }
        if !def.has_phase(&def.initial_phase) {
            self.push("initial_phase", ViolationKind::InitialPhaseMissing);
        }

        let mut seen = HashSet::new();
        for r in &def.roles {
            if !seen.insert(r.as_str()) {
                self.push("roles", ViolationKind::DuplicateRole(r.clone()));
            }
        }

        let mut seen = HashSet::new();
        for (i, slot) in def.sub_activities.iter().enumerate() {
            if !seen.insert(slot.slot_id.as_str()) {
                self.push(
                    format!("sub_activities[{i}].slot_id"),
                    ViolationKind::DuplicateSlot(slot.slot_id.clone()),
                );
            }
            if !is_tool_url(&slot.tool_url) {
                self.push(
                    format!("sub_activities[{i}].tool_url"),
                    ViolationKind::InvalidToolUrl(slot.tool_url.clone()),
                );
            }
            if let Some(tools) = self.tools {
                if !tools.contains_key(&slot.slot_id) {
                    self.push(
                        format!("sub_activities[{i}]"),
                        ViolationKind::UnresolvedTool {
                            slot_id: slot.slot_id.clone(),
                            reason: "no descriptor".into(),
                        },
                    );
                }
            }
        }

        let mut pairs = HashSet::new();
        for (i, m) in def.role_mappings.iter().enumerate() {
            let field = format!("role_mappings[{i}]");
            if !def.has_role(&m.parent_role) {
                self.push(&field, ViolationKind::UnknownRole(m.parent_role.clone()));
            }
            if def.slot(&m.slot_id).is_none() {
                self.push(&field, ViolationKind::UnknownSlot(m.slot_id.clone()));
            } else if let Some(d) = self.descriptor(&m.slot_id) {
                if !d.has_role(&m.sub_role) {
                    self.push(
                        &field,
                        ViolationKind::UnknownSubRole {
                            slot_id: m.slot_id.clone(),
                            role: m.sub_role.clone(),
                        },
                    );
                }
            }
            if !pairs.insert((m.parent_role.as_str(), m.slot_id.as_str())) {
                self.push(
                    &field,
                    ViolationKind::DuplicateRoleMapping {
                        parent_role: m.parent_role.clone(),
                        slot_id: m.slot_id.clone(),
                    },
                );
            }
        }

        let mut ids = HashSet::new();
        for (i, b) in def.bindings.iter().enumerate() {
            let field = format!("bindings[{i}]");
            if !ids.insert(b.binding_id.as_str()) {
                self.push(
                    format!("{field}.binding_id"),
                    ViolationKind::DuplicateBindingId(b.binding_id.clone()),
                );
            }
            self.binding(b, &field);
        }
        self.out
    }

    fn descriptor(&self, slot_id: &str) -> Option<&'a ToolDescriptor> {
        self.tools.and_then(|t| t.get(slot_id))
    }

    fn binding(&mut self, b: &Binding, field: &str) {
        let source_event = self.trigger(&b.source, &format!("{field}.source"));

        if let Some(guard) = &b.guard {
            for (j, atom) in guard.atoms.iter().enumerate() {
                if let GuardSubject::Field(path) = &atom.subject {
                    if !self.payload_path_ok(&b.source, source_event, path) {
                        self.push(
                            format!("{field}.guard.atoms[{j}]"),
                            ViolationKind::InvalidGuardField(path.clone()),
                        );
                    }
                }
            }
        }

        if b.actions.is_empty() {
            self.push(format!("{field}.actions"), ViolationKind::EmptyActions);
        }
        for (j, action) in b.actions.iter().enumerate() {
            let afield = format!("{field}.actions[{j}]");
            match action {
                Action::TransitionPhase { target_phase } => {
                    if !self.def.has_phase(target_phase) {
                        self.push(afield, ViolationKind::UnknownPhase(target_phase.clone()));
                    }
                }
                Action::InvokeCommand {
                    slot_id,
                    command_name,
                    arg_map,
                } => {
                    if self.def.slot(slot_id).is_none() {
                        self.push(afield, ViolationKind::UnknownSlot(slot_id.clone()));
                        continue;
                    }
                    for (param, src) in arg_map {
                        if let ArgSource::Payload { path } = src {
                            if !self.payload_path_ok(&b.source, source_event, path) {
                                self.push(
                                    format!("{afield}.arg_map.{param}"),
                                    ViolationKind::UnknownPayloadField(path.clone()),
                                );
                            }
                        }
                    }
                    let Some(d) = self.descriptor(slot_id) else {
                        continue;
                    };
                    match d.command(command_name) {
                        None => self.push(
                            afield,
                            ViolationKind::UnknownCommand {
                                slot_id: slot_id.clone(),
                                command_name: command_name.clone(),
                            },
                        ),
                        Some(sig) => self.arg_map(sig, arg_map, &afield),
                    }
                }
            }
        }
    }

    /// Returns the source event's signature when it is resolvable.
    fn trigger(&mut self, t: &Trigger, field: &str) -> Option<&'a EventSignature> {
        match t {
            Trigger::PhaseEntered { phase } => {
                if !self.def.has_phase(phase) {
                    self.push(field, ViolationKind::UnknownPhase(phase.clone()));
                }
                None
            }
            Trigger::ToolEvent {
                slot_id,
                event_name,
            } => {
                if self.def.slot(slot_id).is_none() {
                    self.push(field, ViolationKind::UnknownSlot(slot_id.clone()));
                    return None;
                }
                let d = self.descriptor(slot_id)?;
                let sig = d.event(event_name);
                if sig.is_none() && event_name != TOOL_FAILED_EVENT {
                    self.push(
                        field,
                        ViolationKind::UnknownEvent {
                            slot_id: slot_id.clone(),
                            event_name: event_name.clone(),
                        },
                    );
                }
                sig
            }
        }
    }

    /// Payload paths are only meaningful for tool-event sources; the first
    /// segment must be a declared payload field when the schema is known.
    fn payload_path_ok(&self, source: &Trigger, sig: Option<&EventSignature>, path: &str) -> bool {
        let Trigger::ToolEvent { event_name, .. } = source else {
            return false;
        };
        let head = path.split('.').next().unwrap_or_default();
        if head.is_empty() {
            return false;
        }
        if event_name == TOOL_FAILED_EVENT {
            return head == "reason";
        }
        match sig {
            Some(s) => s.payload_schema.contains_key(head),
            // Schema unknown: structural pass, or the event itself was
            // already reported.
            None => true,
        }
    }

    fn arg_map(
        &mut self,
        sig: &OperationSignature,
        arg_map: &BTreeMap<String, ArgSource>,
        field: &str,
    ) {
        for p in &sig.params {
            match arg_map.get(&p.name) {
                None => self.push(
                    field,
                    ViolationKind::MissingArg {
                        command_name: sig.name.clone(),
                        param: p.name.clone(),
                    },
                ),
                Some(ArgSource::Literal { value }) if !p.ty.admits(value) => self.push(
                    format!("{field}.arg_map.{}", p.name),
                    ViolationKind::ArgTypeMismatch {
                        param: p.name.clone(),
                        expected: p.ty.to_string(),
                    },
                ),
                Some(_) => {}
            }
        }
        for name in arg_map.keys() {
            if sig.param(name).is_none() {
                self.push(
                    field,
                    ViolationKind::UnexpectedArg {
                        command_name: sig.name.clone(),
                        param: name.clone(),
                    },
                );
            }
        }
    }
}

/// Descriptor invariants. Returns a human-readable reason per broken rule.
pub fn validate_descriptor(d: &ToolDescriptor) -> Vec<String> {
    let mut out = Vec::new();
    if !is_tool_id(&d.tool_id) {
        out.push(format!("tool_id `{}` is not lowercase kebab case", d.tool_id));
    }
    if semver::Version::parse(&d.version).is_err() {
        out.push(format!("version `{}` is not semver", d.version));
    }
    if d.roles.is_empty() {
        out.push("roles list is empty".into());
    }
    let mut names = BTreeSet::new();
    for c in &d.commands {
        if !is_integration_name(&c.name) {
            out.push(format!("command `{}` lacks the ia_ prefix", c.name));
        }
        if !names.insert(c.name.as_str()) {
            out.push(format!("duplicate command `{}`", c.name));
        }
        out.extend(validate_operation(c));
    }
    let mut names = BTreeSet::new();
    for e in &d.events {
        if e.name.is_empty() {
            out.push("event with empty name".into());
        }
        if !names.insert(e.name.as_str()) {
            out.push(format!("duplicate event `{}`", e.name));
        }
    }
    out
}

pub fn validate_operation(op: &OperationSignature) -> Vec<String> {
    let mut out = Vec::new();
    if op.name.is_empty() {
        out.push("operation with empty name".into());
    }
    let mut seen = HashSet::new();
    for p in &op.params {
        if !seen.insert(p.name.as_str()) {
            out.push(format!("operation `{}` repeats param `{}`", op.name, p.name));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::types::*;
    use serde_json::json;

    fn debate() -> ActivityDefinition {
        ActivityDefinition {
            definition_id: "debate".into(),
            kind: "debate".into(),
            phases: vec!["open".into(), "motion-pending".into(), "closed".into()],
            initial_phase: "open".into(),
            roles: vec!["chair".into(), "debater".into()],
            sub_activities: vec![
                SubActivitySlot {
                    slot_id: "vote".into(),
                    tool_url: "local:vote".into(),
                    instance_params: Default::default(),
                },
                SubActivitySlot {
                    slot_id: "forum".into(),
                    tool_url: "http://127.0.0.1:8080/forum.tool.json".into(),
                    instance_params: Default::default(),
                },
            ],
            role_mappings: vec![RoleMapping::new("chair", "forum", "moderator")],
            bindings: vec![Binding::new(
                "motion-closes-forum",
                Trigger::tool_event("vote", "motion_proposed"),
                vec![
                    Action::transition("motion-pending"),
                    Action::invoke("forum", "ia_stop_discussion"),
                ],
            )
            .with_guard(vec![GuardAtom::phase_is("open")])],
        }
    }

    fn kinds(v: Vec<Violation>) -> Vec<ViolationKind> {
        v.into_iter().map(|v| v.kind).collect()
    }

    #[test]
    fn well_formed_debate_passes() {
        assert_eq!(validate_activity_definition(&debate()), vec![]);
    }

    #[test]
    fn misspelled_slot_is_reported() {
        let mut def = debate();
        def.bindings[0].actions[1] = Action::invoke("forrum", "ia_stop_discussion");
        assert_eq!(
            kinds(validate_activity_definition(&def)),
            vec![ViolationKind::UnknownSlot("forrum".into())]
        );
    }

    #[test]
    fn initial_phase_must_exist() {
        let mut def = debate();
        def.initial_phase = "lobby".into();
        assert_eq!(
            kinds(validate_activity_definition(&def)),
            vec![ViolationKind::InitialPhaseMissing]
        );
    }

    #[test]
    fn violations_name_the_field() {
        let mut def = debate();
        def.bindings[0].actions.clear();
        let v = validate_activity_definition(&def);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "bindings[0].actions");
        assert_eq!(v[0].kind, ViolationKind::EmptyActions);
    }

    #[test]
    fn structural_rules() {
        let mut def = debate();
        def.phases.push("open".into());
        def.sub_activities.push(def.sub_activities[0].clone());
        def.sub_activities[1].tool_url = "ftp://example.org/x".into();
        def.role_mappings.push(RoleMapping::new("chair", "forum", "participant"));
        def.role_mappings.push(RoleMapping::new("dean", "vote", "chair"));
        def.bindings.push(def.bindings[0].clone());
        let got = kinds(validate_activity_definition(&def));
        for want in [
            ViolationKind::DuplicatePhase("open".into()),
            ViolationKind::DuplicateSlot("vote".into()),
            ViolationKind::InvalidToolUrl("ftp://example.org/x".into()),
            ViolationKind::DuplicateRoleMapping {
                parent_role: "chair".into(),
                slot_id: "forum".into(),
            },
            ViolationKind::UnknownRole("dean".into()),
            ViolationKind::DuplicateBindingId("motion-closes-forum".into()),
        ] {
            assert!(got.contains(&want), "missing {want:?} in {got:?}");
        }
    }

    #[test]
    fn payload_refs_need_a_tool_event_source() {
        let mut def = debate();
        def.bindings.push(
            Binding::new(
                "on-pending",
                Trigger::phase_entered("motion-pending"),
                vec![Action::transition("closed")],
            )
            .with_guard(vec![GuardAtom::field("motion_id", CompareOp::Eq, json!("m1"))]),
        );
        assert_eq!(
            kinds(validate_activity_definition(&def)),
            vec![ViolationKind::InvalidGuardField("motion_id".into())]
        );
    }

    fn tools() -> BTreeMap<String, ToolDescriptor> {
        let vote = ToolDescriptor {
            tool_id: "vote".into(),
            version: "1.0.0".into(),
            activity_kind: "decision".into(),
            commands: vec![OperationSignature::new(
                "ia_close_poll",
                vec![Param::new("poll", SemanticType::String)],
                None,
            )],
            events: vec![EventSignature::new(
                "motion_proposed",
                [
                    ("motion_id", SemanticType::String),
                    ("motion", SemanticType::String),
                    ("actor", SemanticType::UserRef),
                ],
            )],
            roles: vec!["chair".into(), "voter".into()],
            artifact_hash: "00".into(),
        };
        let forum = ToolDescriptor {
            tool_id: "forum".into(),
            version: "1.0.0".into(),
            activity_kind: "discussion".into(),
            commands: vec![OperationSignature::new("ia_stop_discussion", vec![], None)],
            events: vec![],
            roles: vec!["moderator".into(), "participant".into()],
            artifact_hash: "01".into(),
        };
        [("vote".to_string(), vote), ("forum".to_string(), forum)].into()
    }

    #[test]
    fn tool_level_references() {
        assert_eq!(validate_with_tools(&debate(), &tools()), vec![]);

        let mut def = debate();
        def.role_mappings.push(RoleMapping::new("debater", "forum", "king"));
        def.bindings.push(Binding::new(
            "bad",
            Trigger::tool_event("vote", "motion_withdrawn"),
            vec![
                Action::invoke("forum", "ia_delete_everything"),
                Action::invoke_with("vote", "ia_close_poll", [("poll", ArgSource::literal(7))]),
                Action::invoke_with(
                    "vote",
                    "ia_close_poll",
                    [
                        ("poll", ArgSource::payload("motion_id")),
                        ("extra", ArgSource::Actor),
                    ],
                ),
                Action::invoke("vote", "ia_close_poll"),
            ],
        ));
        let got = kinds(validate_with_tools(&def, &tools()));
        assert_eq!(
            got,
            vec![
                ViolationKind::UnknownSubRole {
                    slot_id: "forum".into(),
                    role: "king".into()
                },
                ViolationKind::UnknownEvent {
                    slot_id: "vote".into(),
                    event_name: "motion_withdrawn".into()
                },
                ViolationKind::UnknownCommand {
                    slot_id: "forum".into(),
                    command_name: "ia_delete_everything".into()
                },
                ViolationKind::ArgTypeMismatch {
                    param: "poll".into(),
                    expected: "string".into()
                },
                ViolationKind::UnexpectedArg {
                    command_name: "ia_close_poll".into(),
                    param: "extra".into()
                },
                ViolationKind::MissingArg {
                    command_name: "ia_close_poll".into(),
                    param: "poll".into()
                },
            ]
        );
    }

    #[test]
    fn missing_descriptor_is_unresolved() {
        let mut t = tools();
        t.remove("forum");
        let got = kinds(validate_with_tools(&debate(), &t));
        assert!(matches!(&got[0], ViolationKind::UnresolvedTool { slot_id, .. } if slot_id == "forum"));
    }

    #[test]
    fn naming_convention() {
        assert!(is_integration_name("ia_stop_discussion"));
        assert!(is_integration_name("ia_x2"));
        assert!(!is_integration_name("IA_Stop"));
        assert!(!is_integration_name("ia_"));
        assert!(!is_integration_name("ia_2x"));
        assert!(!is_integration_name("render_widget"));
    }

    #[test]
    fn tool_urls() {
        assert!(is_tool_url("http://localhost:9000/forum.tool.json"));
        assert!(is_tool_url("https://tools.example.org/vote"));
        assert!(is_tool_url("local:doc-share"));
        assert!(!is_tool_url("local:Doc Share"));
        assert!(!is_tool_url("forum.tool.json"));
        assert!(!is_tool_url("file:///tmp/forum"));
    }

    #[test]
    fn descriptor_rules() {
        let mut d = tools().remove("vote").unwrap();
        assert!(validate_descriptor(&d).is_empty());
        d.roles.clear();
        d.version = "one".into();
        d.commands.push(OperationSignature::new("cast", vec![], None));
        d.commands.push(d.commands[0].clone());
        assert_eq!(validate_descriptor(&d).len(), 4);
    }
}
