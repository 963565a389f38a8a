//! Console HTTP API against a live server, including the stream resume.

use std::io::{BufRead, BufReader, Read};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use coolda::{console_router, BackgroundHttp};
use coolda_core::harness::{load_definition, Predicate, Rig, RunOptions};
use coolda_core::model::{TraceEntry, TraceKind};
use coolda_core::server::{ActivityServer, ServerConfig};
use coolda_core::tools::example_registry;
use serde_json::{json, Map, Value};

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(10)))
        .http_status_as_error(false)
        .build()
        .into()
}

struct Console {
    server: Arc<ActivityServer>,
    http: BackgroundHttp,
    agent: ureq::Agent,
}

impl Console {
    fn start() -> Self {
        let server = Arc::new(ActivityServer::new(Arc::new(example_registry()), ServerConfig::default()));
        let http = BackgroundHttp::start(console_router(server.clone()), "127.0.0.1:0").unwrap();
        Console { server, http, agent: agent() }
    }

    fn get(&self, path: &str) -> (u16, Value) {
        let mut r = self.agent.get(&self.http.url(path)).call().unwrap();
        (r.status().as_u16(), body(&mut r))
    }

    fn post(&self, path: &str, v: &Value) -> (u16, Value) {
        let mut r = self
            .agent
            .post(&self.http.url(path))
            .header("content-type", "application/json")
            .send(v.to_string())
            .unwrap();
        (r.status().as_u16(), body(&mut r))
    }

    fn delete(&self, path: &str) -> u16 {
        self.agent.delete(&self.http.url(path)).call().unwrap().status().as_u16()
    }
}

fn body(r: &mut ureq::http::Response<ureq::Body>) -> Value {
    let text = r.body_mut().read_to_string().unwrap();
    serde_json::from_str(&text).unwrap_or(Value::Null)
}

fn args(v: Value) -> Map<String, Value> {
    v.as_object().cloned().unwrap()
}

fn debate_json() -> Value {
    serde_json::from_str(&std::fs::read_to_string(repo().join("definitions/debate.json")).unwrap()).unwrap()
}

fn reopen_binding() -> Value {
    json!({
        "binding_id": "decision-reopens-forum",
        "source": { "type": "tool_event", "slot_id": "vote", "event_name": "motion_decided" },
        "actions": [
            { "type": "transition_phase", "target_phase": "open" },
            { "type": "invoke_command", "slot_id": "forum", "command_name": "ia_resume_discussion", "arg_map": {} }
        ]
    })
}

/// Minimal reader for `text/event-stream`.
struct Sse {
    lines: std::io::Lines<BufReader<Box<dyn Read + Send>>>,
}

impl Sse {
    fn open(c: &Console, instance: &str, last_id: Option<usize>) -> Self {
        let mut req = c.agent.get(&c.http.url(&format!("/instances/{instance}/stream")));
        if let Some(id) = last_id {
            req = req.header("Last-Event-ID", &id.to_string());
        }
        let resp = req.call().unwrap();
        assert_eq!(resp.status().as_u16(), 200);
        let reader: Box<dyn Read + Send> = Box::new(resp.into_body().into_reader());
        Sse {
            lines: BufReader::new(reader).lines(),
        }
    }

    fn next(&mut self) -> (usize, String, TraceEntry) {
        let (mut id, mut event, mut data) = (None, String::new(), String::new());
        for line in self.lines.by_ref() {
            let line = line.unwrap();
            if line.is_empty() {
                if let Some(id) = id {
                    return (id, event, serde_json::from_str(&data).unwrap());
                }
                continue;
            }
            if let Some(v) = line.strip_prefix("id:") {
                id = Some(v.trim().parse().unwrap());
            } else if let Some(v) = line.strip_prefix("event:") {
                event = v.trim().into();
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push_str(v.strip_prefix(' ').unwrap_or(v));
            }
        }
        panic!("stream ended");
    }
}

#[test]
fn instances_are_created_listed_and_inspected() {
    let c = Console::start();
    let (status, created) = c.post("/instances", &debate_json());
    assert_eq!(status, 201);
    let id = created["instance_id"].as_str().unwrap().to_string();

    let (status, list) = c.get("/instances");
    assert_eq!(status, 200);
    assert_eq!(list[0]["instance_id"], json!(id));
    assert_eq!(list[0]["phase"], json!("open"));

    let (status, snap) = c.get(&format!("/instances/{id}"));
    assert_eq!(status, 200);
    assert_eq!(snap["definition_id"], json!("debate"));

    let (status, err) = c.get("/instances/act-99");
    assert_eq!(status, 404);
    assert_eq!(err["code"], json!("unknown_instance"));
}

#[test]
fn invalid_definitions_come_back_with_violations() {
    let c = Console::start();
    let mut def = debate_json();
    def["initial_phase"] = json!("nowhere");
    let (status, err) = c.post("/instances", &def);
    assert_eq!(status, 422);
    assert_eq!(err["code"], json!("invalid_definition"));
    assert!(!err["violations"].as_array().unwrap().is_empty());
}

#[test]
fn bindings_round_trip_through_the_snapshot() {
    let c = Console::start();
    let id = c.server.create_activity(serde_json::from_value(debate_json()).unwrap()).unwrap();

    let (status, added) = c.post(&format!("/instances/{id}/bindings"), &reopen_binding());
    assert_eq!(status, 201);
    assert_eq!(added["binding_id"], json!("decision-reopens-forum"));
    let (_, snap) = c.get(&format!("/instances/{id}"));
    assert_eq!(snap["live_bindings"][0]["binding_id"], json!("decision-reopens-forum"));

    // missing argument for a command that takes one
    let mut bad = reopen_binding();
    bad["binding_id"] = json!("bad");
    bad["actions"] = json!([{ "type": "invoke_command", "slot_id": "vote", "command_name": "ia_open_poll", "arg_map": {} }]);
    let (status, err) = c.post(&format!("/instances/{id}/bindings"), &bad);
    assert_eq!(status, 422);
    assert!(!err["violations"].as_array().unwrap().is_empty());

    assert_eq!(c.delete(&format!("/instances/{id}/bindings/decision-reopens-forum")), 204);
    let (_, snap) = c.get(&format!("/instances/{id}"));
    assert_eq!(snap["live_bindings"], json!([]));
    assert_eq!(c.delete(&format!("/instances/{id}/bindings/decision-reopens-forum")), 404);
}

#[test]
fn tool_browser_shows_the_filtered_surface() {
    let c = Console::start();
    let (status, v) = c.get("/tools?url=local:forum");
    assert_eq!(status, 200);
    let commands: Vec<&str> = v["descriptor"]["commands"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["name"].as_str().unwrap())
        .collect();
    assert_eq!(commands, ["ia_stop_discussion", "ia_resume_discussion"]);
    assert!(v["rejected"].as_array().unwrap().iter().any(|o| o["name"] == json!("post")));

    let (_, vote) = c.get("/tools?url=local:vote");
    assert!(vote["descriptor"]["events"].as_array().unwrap().iter().any(|e| e["name"] == json!("motion_proposed")));

    let (status, err) = c.get("/tools?url=http://127.0.0.1:1/forum.tool.json");
    assert_eq!(status, 502);
    assert_eq!(err["code"], json!("network_unreachable"));
    let (status, _) = c.get("/tools?url=local:nope");
    assert_eq!(status, 404);
}

#[test]
fn live_binding_reopens_forum_and_stream_survives_reconnect() {
    let c = Console::start();
    let def = load_definition(&repo().join("definitions/debate.json")).unwrap();
    let mut rig = Rig::on_server(c.server.clone(), def, &RunOptions::default()).unwrap();
    let id = rig.instance_id.clone();

    let mut first = Sse::open(&c, &id, None);
    let (status, _) = c.post(&format!("/instances/{id}/bindings"), &reopen_binding());
    assert_eq!(status, 201);
    rig.join("alice", "chair").unwrap();
    rig.join("bob", "debater").unwrap();
    rig.quiesce(0).unwrap();

    let mut seen: Vec<(usize, TraceEntry)> = Vec::new();
    for _ in 0..3 {
        let (i, _, e) = first.next();
        seen.push((i, e));
    }
    drop(first);

    let poll = rig
        .host("bob")
        .unwrap()
        .user_action(&id, "vote", "propose_motion", &args(json!({"motion": "adjourn"})))
        .unwrap();
    rig.quiesce(1).unwrap();
    assert!(rig.check(&Predicate::PhaseIs("motion-pending".into())).unwrap().0);
    rig.host("alice")
        .unwrap()
        .user_action(&id, "vote", "decide", &args(json!({"poll": poll})))
        .unwrap();
    rig.quiesce(2).unwrap();

    let reopened = Predicate::ToolState {
        slot: "forum".into(),
        field: "accepting".into(),
        equals: json!(true),
        user: None,
    };
    let (ok, detail) = rig.check(&reopened).unwrap();
    assert!(ok, "{detail}");
    assert_eq!(c.server.snapshot(&id).unwrap().phase, "open");

    let trace = c.server.trace(&id).unwrap();
    let mut second = Sse::open(&c, &id, Some(seen.last().unwrap().0));
    while seen.len() < trace.entries.len() {
        let (i, event, e) = second.next();
        assert_eq!(event, e.kind.name());
        seen.push((i, e));
    }
    let ids: Vec<usize> = seen.iter().map(|(i, _)| *i).collect();
    assert_eq!(ids, (0..trace.entries.len()).collect::<Vec<_>>());
    let streamed: Vec<TraceEntry> = seen.into_iter().map(|(_, e)| e).collect();
    assert_eq!(streamed, trace.entries);
    let seqs: Vec<u64> = streamed.iter().map(|e| e.seq).collect();
    assert!(seqs.windows(2).all(|w| w[0] <= w[1]));
    assert!(streamed.iter().any(|e| matches!(&e.kind,
        TraceKind::CommandDispatched { command, .. } if command.command_name == "ia_resume_discussion")));
}

#[test]
fn idle_instance_streams_only_its_backlog() {
    let c = Console::start();
    let id = c.server.create_activity(serde_json::from_value(debate_json()).unwrap()).unwrap();
    let mut s = Sse::open(&c, &id, None);
    let (i, event, _) = s.next();
    assert_eq!((i, event.as_str()), (0, "instance_created"));
    // nothing further arrives until something happens
    c.server.transition_phase(&id, "closed", "test").unwrap();
    let (i, event, _) = s.next();
    assert_eq!((i, event.as_str()), (1, "phase_changed"));
}
