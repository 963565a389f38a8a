//! Bundled example tools.
//!
//! Each tool has a client (what the host instantiates) and a server shared by
//! every client of the same session, reached through the [`ToolNetwork`].
//! The client/server schemes differ on purpose:
//!
//! | tool      | scheme                              |
//! |-----------|-------------------------------------|
//! | forum     | request/response, pushed notices    |
//! | vote      | full-state snapshot replication     |
//! | chat      | broadcast fan-out                   |
//! | doc-share | append-only operation log, pulled   |
//!
//! [`ToolNetwork`]: crate::contract::ToolNetwork

use std::path::Path;
use std::sync::Arc;

use serde_json::{Map, Value};

use crate::contract::{ToolError, ToolFactory, ToolManifest};
use crate::registry::{package_artifact, ToolRegistry};

pub mod chat;
pub mod docshare;
pub mod forum;
pub mod vote;

pub use chat::Chat;
pub use docshare::DocShare;
pub use forum::Forum;
pub use vote::Vote;

pub fn example_factories() -> Vec<Arc<dyn ToolFactory>> {
    vec![Arc::new(Vote), Arc::new(Forum), Arc::new(Chat), Arc::new(DocShare)]
}

/// A registry with the example runtimes linked in and each tool reachable as
/// `local:<tool_id>`.
pub fn example_registry() -> ToolRegistry {
    let registry = ToolRegistry::new();
    for f in example_factories() {
        registry
            .register_inprocess_tool(f)
            .expect("example tools have distinct valid descriptors");
    }
    registry
}

/// Artifact file name used when packaging a tool for static serving.
pub fn artifact_file_name(tool_id: &str) -> String {
    format!("{tool_id}.tool.json")
}

/// Writes one artifact per example tool into `dir`; returns the file names.
pub fn package_examples(dir: &Path) -> std::io::Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for f in example_factories() {
        let m = f.manifest();
        let name = artifact_file_name(&m.tool_id);
        std::fs::write(dir.join(&name), package_artifact(&m.tool_id, &m))?;
        names.push(name);
    }
    Ok(names)
}

pub(crate) fn check_op(manifest: &ToolManifest, op: &str, args: &Map<String, Value>) -> Result<(), ToolError> {
    let sig = manifest
        .operations
        .iter()
        .find(|o| o.name == op)
        .ok_or_else(|| ToolError::UnknownOperation(op.into()))?;
    sig.check_args(args).map_err(ToolError::BadArgs)
}

pub(crate) fn payload(pairs: &[(&str, Value)]) -> Map<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

pub(crate) fn is_integration(op: &str) -> bool {
    crate::model::is_integration_name(op)
}

#[cfg(test)]
mod conformance {
    //! Shared plugin-contract checks run against every example tool.

    use super::*;
    use crate::contract::{EventSink, InstantiateContext, ToolNetwork};
    use crate::model::{is_integration_name, SemanticType};
    use crate::registry::{describe_tool, PluginArtifact};
    use serde_json::json;
    use std::collections::BTreeMap;

    fn sample(ty: SemanticType, user: &str) -> Value {
        match ty {
            SemanticType::String => json!("m1"),
            SemanticType::Integer => json!(1),
            SemanticType::Boolean => json!(true),
            SemanticType::UserRef => json!(user),
            SemanticType::RoleRef => json!("member"),
            SemanticType::Json => json!({}),
        }
    }

    #[test]
    fn every_tool_honours_the_contract() {
        for factory in example_factories() {
            let m = factory.manifest();
            let artifact = PluginArtifact::from_bytes("local:x", package_artifact(&m.tool_id, &m));
            let (d1, raw) = describe_tool(&artifact).unwrap();
            let (d2, _) = describe_tool(&artifact).unwrap();
            assert_eq!(d1, d2, "describe is stable for {}", m.tool_id);
            assert_eq!(factory.manifest(), m);
            for op in &raw.all_operations {
                assert_eq!(
                    d1.command(&op.name).is_some(),
                    is_integration_name(&op.name),
                    "{}: {} misfiled",
                    m.tool_id,
                    op.name
                );
            }
            assert!(raw.all_operations.iter().any(|o| !is_integration_name(&o.name)));

            let net = ToolNetwork::new();
            let params = BTreeMap::new();
            let mut inst = factory
                .instantiate(InstantiateContext {
                    user_id: "alice",
                    session: "conformance",
                    instance_params: &params,
                    assigned_role: Some(&m.roles[0]),
                    network: &net,
                })
                .unwrap();
            let sink = EventSink::new();
            inst.subscribe(sink.clone());

            // Exercise user-level operations first so commands have something to act on.
            for op in raw.all_operations.iter().filter(|o| !is_integration_name(&o.name)) {
                let args: Map<String, Value> =
                    op.params.iter().map(|p| (p.name.clone(), sample(p.ty, "alice"))).collect();
                let _ = inst.user_action(&op.name, &args);
            }
            for cmd in &d1.commands {
                let args: Map<String, Value> =
                    cmd.params.iter().map(|p| (p.name.clone(), sample(p.ty, "alice"))).collect();
                match inst.invoke(&cmd.name, &args) {
                    Ok(_) | Err(ToolError::Rejected { .. }) => {}
                    Err(e) => panic!("{}: {} not callable: {e}", m.tool_id, cmd.name),
                }
            }
            assert!(matches!(
                inst.invoke("render_everything", &Map::new()),
                Err(ToolError::UnknownOperation(_))
            ));
            for ev in sink.drain() {
                let sig = d1
                    .event(&ev.event_name)
                    .unwrap_or_else(|| panic!("{} emitted undeclared {}", m.tool_id, ev.event_name));
                sig.check_payload(&ev.payload).unwrap();
            }
            inst.shutdown();
            let _ = inst.user_action(&raw.all_operations[0].name, &Map::new());
            assert!(sink.drain().is_empty(), "no events after shutdown");
        }
    }

    #[test]
    fn packaged_artifacts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let names = package_examples(dir.path()).unwrap();
        assert_eq!(names.len(), 4);
        for name in names {
            let bytes = std::fs::read(dir.path().join(&name)).unwrap();
            let (d, _) = describe_tool(&PluginArtifact::from_bytes(&name, bytes)).unwrap();
            assert_eq!(artifact_file_name(&d.tool_id), name);
        }
    }
}
