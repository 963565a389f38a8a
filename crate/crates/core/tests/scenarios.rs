use std::path::PathBuf;
use std::sync::Arc;

use coolda_core::harness::{
    check_replay, compare_traces, read_trace, run_scenario, write_trace, RunMode, RunOptions,
    ScenarioRun, ScenarioScript,
};
use coolda_core::model::TraceKind;
use coolda_core::server::ServerConfig;
use coolda_core::tools::example_registry;
use serde_json::json;

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(name: &str, mode: RunMode) -> ScenarioRun {
    let (script, dir) = ScenarioScript::load(&repo().join("scenarios").join(name)).unwrap();
    let opts = RunOptions {
        mode,
        ..Default::default()
    };
    run_scenario(&script, &dir, &opts).unwrap()
}

const ALL: [&str; 4] = ["debate.json", "course.json", "course-student.json", "empty.json"];

#[test]
fn bundled_scenarios_pass_in_both_modes() {
    for name in ALL {
        for mode in [RunMode::Inprocess, RunMode::Sockets] {
            let r = run(name, mode);
            for e in &r.expects {
                assert!(e.passed, "{name} {mode:?} step {}: {}", e.step, e.detail);
            }
            r.trace.check_invariants().unwrap();
        }
    }
}

#[test]
fn empty_scenario_only_creates() {
    let r = run("empty.json", RunMode::Inprocess);
    assert_eq!(r.trace.entries.len(), 1);
    assert!(matches!(r.trace.entries[0].kind, TraceKind::InstanceCreated { .. }));
    assert!(r.expects.is_empty());
}

#[test]
fn debate_reaches_every_forum_client() {
    let r = run("debate.json", RunMode::Inprocess);
    assert_eq!(r.snapshot.phase, "motion-pending");
    assert_eq!(r.tool_states.len(), 3);
    for (user, slots) in &r.tool_states {
        assert_eq!(slots["forum"]["accepting"], json!(false), "{user}");
    }
    // the motion is the only trigger that fired a binding
    let passed = r.trace.count(|k| matches!(k, TraceKind::GuardEvaluated { passed: true, .. }));
    assert_eq!(passed, 1);
}

#[test]
fn runs_are_reproducible() {
    for name in ALL {
        let a = run(name, RunMode::Inprocess);
        let b = run(name, RunMode::Inprocess);
        let c = run(name, RunMode::Sockets);
        assert!(compare_traces(&a.trace, &b.trace).is_empty(), "{name}");
        assert!(compare_traces(&a.trace, &c.trace).is_empty(), "{name}");
    }
    let debate = run("debate.json", RunMode::Inprocess);
    let course = run("course.json", RunMode::Inprocess);
    assert!(!compare_traces(&debate.trace, &course.trace).is_empty());
}

#[test]
fn traces_survive_export_and_replay() {
    for name in ALL {
        let r = run(name, RunMode::Inprocess);
        let mut buf = Vec::new();
        write_trace(&r.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), r.trace.entries.len());
        let back = read_trace(&buf[..]).unwrap();
        assert_eq!(back.entries, r.trace.entries);
        let diff = check_replay(&back, Arc::new(example_registry()), ServerConfig::default()).unwrap();
        assert!(diff.is_empty(), "{name}:\n{diff}");
    }
}
