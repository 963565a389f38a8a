//! Failure paths of the host/server pipeline, driven with a deliberately
//! badly behaved tool.

use std::collections::BTreeMap;
use std::sync::Arc;

use coolda_core::contract::{
    EventSink, InstantiateContext, ToolError, ToolFactory, ToolInstance, ToolManifest, ToolNetwork,
};
use coolda_core::host::{HostConfig, PluginHost};
use coolda_core::model::{
    Action, ActivityDefinition, Binding, CompletionOutcome, ErrorOrigin, EventSignature,
    OperationSignature, SemanticType, SubActivitySlot, ToolInstanceState, TraceKind, Trigger,
};
use coolda_core::server::{ActivityServer, ServerConfig};
use coolda_core::tools::example_registry;
use coolda_core::wire::{InProcessLink, TcpFront, TcpLink};
use serde_json::{json, Map, Value};

struct Gremlin;

impl ToolFactory for Gremlin {
    fn manifest(&self) -> ToolManifest {
        ToolManifest {
            tool_id: "gremlin".into(),
            version: "0.0.1".into(),
            activity_kind: "test".into(),
            roles: vec!["any".into()],
            operations: vec![
                OperationSignature::new("ia_crash", vec![], None),
                OperationSignature::new("ia_poke", vec![], None),
                OperationSignature::new("mutter", vec![], None),
            ],
            events: vec![EventSignature::new("poked", [("n", SemanticType::Integer)])],
        }
    }

    fn instantiate(&self, _: InstantiateContext<'_>) -> Result<Box<dyn ToolInstance>, ToolError> {
        Ok(Box::new(GremlinClient { sink: None, pokes: 0 }))
    }
}

struct GremlinClient {
    sink: Option<EventSink>,
    pokes: i64,
}

impl ToolInstance for GremlinClient {
    fn invoke(&mut self, command: &str, _: &Map<String, Value>) -> Result<Value, ToolError> {
        match command {
            "ia_crash" => Err(ToolError::Fatal("gremlin exploded".into())),
            "ia_poke" => {
                self.pokes += 1;
                if let Some(s) = &self.sink {
                    s.emit("poked", json!({"n": self.pokes}).as_object().cloned().unwrap(), None);
                }
                Ok(Value::Null)
            }
            other => Err(ToolError::UnknownOperation(other.into())),
        }
    }

    fn user_action(&mut self, op: &str, args: &Map<String, Value>) -> Result<Value, ToolError> {
        match op {
            "mutter" => {
                if let Some(s) = &self.sink {
                    s.emit("grumbled", Map::new(), None);
                }
                Ok(Value::Null)
            }
            other => self.invoke(other, args),
        }
    }

    fn subscribe(&mut self, sink: EventSink) {
        self.sink = Some(sink);
    }

    fn state(&mut self) -> Value {
        json!({ "pokes": self.pokes })
    }

    fn shutdown(&mut self) {
        if let Some(s) = &self.sink {
            s.close();
        }
    }
}

fn definition(bindings: Vec<Binding>) -> ActivityDefinition {
    ActivityDefinition {
        definition_id: "gremlins".into(),
        kind: "test".into(),
        phases: vec!["calm".into(), "chaos".into()],
        initial_phase: "calm".into(),
        roles: vec!["keeper".into()],
        sub_activities: vec![SubActivitySlot {
            slot_id: "g".into(),
            tool_url: "local:gremlin".into(),
            instance_params: BTreeMap::new(),
        }],
        role_mappings: vec![],
        bindings,
    }
}

struct Setup {
    server: Arc<ActivityServer>,
    host: PluginHost,
    id: String,
}

fn setup(bindings: Vec<Binding>, config: ServerConfig) -> Setup {
    let registry = example_registry();
    registry.register_inprocess_tool(Arc::new(Gremlin)).unwrap();
    let registry = Arc::new(registry);
    let server = Arc::new(ActivityServer::new(registry.clone(), config));
    let id = server.create_activity(definition(bindings)).unwrap();
    let mut host = PluginHost::connect(
        "kim",
        registry,
        Arc::new(ToolNetwork::new()),
        Box::new(InProcessLink::new(server.clone())),
        HostConfig::default(),
    )
    .unwrap();
    host.join(&id, "keeper").unwrap();
    Setup { server, host, id }
}

#[test]
fn fatal_tool_error_fails_instance_and_reports_upward() {
    let crash = Binding::new(
        "enter-chaos",
        Trigger::phase_entered("chaos"),
        vec![Action::invoke("g", "ia_crash")],
    );
    let mut s = setup(vec![crash], ServerConfig::default());
    s.server.transition_phase(&s.id, "chaos", "test").unwrap();
    while s.host.pump().unwrap() {}

    let trace = s.server.trace(&s.id).unwrap();
    let failed_completion = trace.count(|k| {
        matches!(k, TraceKind::CommandCompleted { outcome: CompletionOutcome::Error { code, .. }, .. } if code == "tool_failed")
    });
    assert_eq!(failed_completion, 1);
    let tool_failed = trace.count(|k| matches!(k, TraceKind::EventReceived { event } if event.event_name == "tool_failed"));
    assert_eq!(tool_failed, 1);
    // no rollback: the phase change stands
    let snap = s.server.snapshot(&s.id).unwrap();
    assert_eq!(snap.phase, "chaos");
    assert_eq!(snap.sub_instances["g"].state, ToolInstanceState::Failed);
}

#[test]
fn undeclared_events_are_dropped_and_audited() {
    let mut s = setup(vec![], ServerConfig::default());
    let id = s.id.clone();
    s.host.user_action(&id, "g", "mutter", &Map::new()).unwrap();
    while s.host.pump().unwrap() {}
    let trace = s.server.trace(&id).unwrap();
    assert_eq!(trace.count(|k| matches!(k, TraceKind::EventReceived { .. })), 0);
    assert_eq!(
        trace.count(|k| matches!(k, TraceKind::Error { origin: ErrorOrigin::Host, code, .. } if code == "undeclared_event")),
        1
    );
}

#[test]
fn command_event_loops_are_cut_by_depth() {
    // poked -> ia_poke -> poked -> ... crosses the host boundary every round
    let loop_binding = Binding::new(
        "poke-again",
        Trigger::tool_event("g", "poked"),
        vec![Action::invoke("g", "ia_poke")],
    );
    let mut s = setup(vec![loop_binding], ServerConfig { max_cascade_depth: 5 });
    let id = s.id.clone();
    s.host.user_action(&id, "g", "ia_poke", &Map::new()).unwrap();
    for _ in 0..100 {
        if !s.host.pump().unwrap() {
            break;
        }
    }
    let trace = s.server.trace(&id).unwrap();
    assert_eq!(trace.count(|k| matches!(k, TraceKind::GuardEvaluated { .. })), 5);
    assert_eq!(
        trace.count(|k| matches!(k, TraceKind::Error { code, .. } if code == "cascade_depth_exceeded")),
        1
    );
    assert_eq!(s.host.tool_state(&id, "g").unwrap()["pokes"], json!(6));
}

#[test]
fn tcp_link_carries_the_same_protocol() {
    let registry = Arc::new(example_registry());
    let server = Arc::new(ActivityServer::new(registry.clone(), ServerConfig::default()));
    let def: ActivityDefinition = serde_json::from_str(
        &std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../definitions/debate.json")).unwrap(),
    )
    .unwrap();
    let id = server.create_activity(def).unwrap();
    let front = TcpFront::bind(server.clone(), "127.0.0.1:0").unwrap();
    let network = Arc::new(ToolNetwork::new());
    let mut hosts: Vec<PluginHost> = ["ann", "ben"]
        .iter()
        .map(|u| {
            PluginHost::connect(
                u,
                registry.clone(),
                network.clone(),
                Box::new(TcpLink::connect(front.local_addr()).unwrap()),
                HostConfig::default(),
            )
            .unwrap()
        })
        .collect();
    hosts[0].join(&id, "chair").unwrap();
    hosts[1].join(&id, "debater").unwrap();
    let err = hosts[1].join(&id, "debater").unwrap_err();
    assert_eq!(err.code(), "already_joined");
    hosts[1]
        .user_action(&id, "vote", "propose_motion", &json!({"motion": "m"}).as_object().cloned().unwrap())
        .unwrap();
    loop {
        let mut moved = false;
        for h in hosts.iter_mut() {
            moved |= h.pump().unwrap();
        }
        if !moved {
            break;
        }
    }
    assert_eq!(server.snapshot(&id).unwrap().phase, "motion-pending");
    for h in hosts.iter_mut() {
        assert_eq!(h.tool_state(&id, "forum").unwrap()["accepting"], json!(false));
    }
}
