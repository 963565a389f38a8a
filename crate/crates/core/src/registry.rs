//! Tool discovery: fetch an artifact from a plain web server (or an in-process
//! registration), let it describe itself, and filter its surface down to the
//! integration commands. Nothing is deposited anywhere; the URL and the
//! artifact bytes are the whole story.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canonical;
use crate::contract::{ToolFactory, ToolManifest};
use crate::model::{
    is_integration_name, validate_descriptor, validate_operation, EventSignature,
    OperationSignature, ToolDescriptor,
};

/// Format tag of a packaged tool artifact.
pub const ARTIFACT_FORMAT: &str = "coolda-tool/1";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("invalid tool url `{0}`")]
    InvalidUrl(String),
    #[error("network unreachable: {0}")]
    NetworkUnreachable(String),
    #[error("http status {0}")]
    HttpStatus(u16),
    #[error("empty body")]
    EmptyBody,
    #[error("not a plugin: {0}")]
    NotAPlugin(String),
    #[error("describe failed: {0}")]
    DescribeFailed(String),
    #[error("tool id `{0}` already registered")]
    DuplicateToolId(String),
    #[error("no in-process tool `{0}`")]
    UnknownLocalTool(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PluginArtifact {
    pub source_url: String,
    pub bytes: Vec<u8>,
    pub artifact_hash: String,
    /// Milliseconds since the Unix epoch.
    pub fetched_at: u64,
}

impl PluginArtifact {
    pub fn from_bytes(source_url: &str, bytes: Vec<u8>) -> Self {
        Self {
            source_url: source_url.into(),
            artifact_hash: digest(&bytes),
            bytes,
            fetched_at: now_ms(),
        }
    }
}

/// Unfiltered introspection output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSurface {
    pub all_operations: Vec<OperationSignature>,
    pub declared_events: Vec<EventSignature>,
}

#[derive(Serialize, Deserialize)]
struct ArtifactDocument {
    format: String,
    /// Runtime entry point the host links the artifact against.
    entry: String,
    #[serde(flatten)]
    manifest: ToolManifest,
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or_default()
}

/// Serializes a manifest into artifact bytes (canonical JSON).
pub fn package_artifact(entry: &str, manifest: &ToolManifest) -> Vec<u8> {
    let doc = ArtifactDocument {
        format: ARTIFACT_FORMAT.into(),
        entry: entry.into(),
        manifest: manifest.clone(),
    };
    canonical::to_canonical_vec(&doc).expect("manifest serializes")
}

/// Entry point named by an artifact, if it is one.
pub fn artifact_entry(artifact: &PluginArtifact) -> Result<String, RegistryError> {
    parse_artifact(&artifact.bytes).map(|d| d.entry)
}

fn parse_artifact(bytes: &[u8]) -> Result<ArtifactDocument, RegistryError> {
    let doc: ArtifactDocument = serde_json::from_slice(bytes)
        .map_err(|e| RegistryError::NotAPlugin(format!("no describe entry point: {e}")))?;
    if doc.format != ARTIFACT_FORMAT {
        return Err(RegistryError::NotAPlugin(format!(
            "unsupported artifact format `{}`",
            doc.format
        )));
    }
    Ok(doc)
}

/// Splits operations by the `ia_` naming convention, preserving order.
pub fn filter_integration_surface(
    raw: &RawSurface,
) -> (Vec<OperationSignature>, Vec<OperationSignature>) {
    raw.all_operations
        .iter()
        .cloned()
        .partition(|op| is_integration_name(&op.name))
}

/// Reads the self-description out of the artifact bytes. Needs no running
/// instance and no registry state.
pub fn describe_tool(artifact: &PluginArtifact) -> Result<(ToolDescriptor, RawSurface), RegistryError> {
    let doc = parse_artifact(&artifact.bytes)?;
    describe_manifest(&doc.manifest, &artifact.artifact_hash)
}

fn describe_manifest(
    m: &ToolManifest,
    artifact_hash: &str,
) -> Result<(ToolDescriptor, RawSurface), RegistryError> {
    let problems: Vec<String> = m.operations.iter().flat_map(validate_operation).collect();
    if !problems.is_empty() {
        return Err(RegistryError::DescribeFailed(problems.join("; ")));
    }
    let raw = RawSurface {
        all_operations: m.operations.clone(),
        declared_events: m.events.clone(),
    };
    let (commands, _rejected) = filter_integration_surface(&raw);
    let descriptor = ToolDescriptor {
        tool_id: m.tool_id.clone(),
        version: m.version.clone(),
        activity_kind: m.activity_kind.clone(),
        commands,
        events: m.events.clone(),
        roles: m.roles.clone(),
        artifact_hash: artifact_hash.into(),
    };
    let problems = validate_descriptor(&descriptor);
    if !problems.is_empty() {
        return Err(RegistryError::DescribeFailed(problems.join("; ")));
    }
    Ok((descriptor, raw))
}

#[derive(Debug, Clone)]
pub struct ResolvedTool {
    pub artifact: PluginArtifact,
    pub descriptor: ToolDescriptor,
    pub raw: RawSurface,
}

/// Fetches artifacts and links them to the tool runtimes compiled into this
/// process.
pub struct ToolRegistry {
    runtimes: RwLock<BTreeMap<String, Arc<dyn ToolFactory>>>,
    local: RwLock<BTreeMap<String, Arc<dyn ToolFactory>>>,
    agent: ureq::Agent,
}

impl Default for ToolRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolRegistry")
            .field("runtimes", &self.runtimes.read().unwrap().keys().collect::<Vec<_>>())
            .field("local", &self.local.read().unwrap().keys().collect::<Vec<_>>())
            .finish()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(10)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            runtimes: RwLock::default(),
            local: RwLock::default(),
            agent,
        }
    }

    /// Makes `factory` available as the code behind artifacts naming `entry`.
    pub fn add_runtime(&self, entry: &str, factory: Arc<dyn ToolFactory>) {
        self.runtimes.write().unwrap().insert(entry.into(), factory);
    }

    pub fn runtime(&self, entry: &str) -> Option<Arc<dyn ToolFactory>> {
        self.runtimes.read().unwrap().get(entry).cloned()
    }

    /// Registers a tool reachable as `local:<tool_id>`, bypassing HTTP.
    pub fn register_inprocess_tool(&self, factory: Arc<dyn ToolFactory>) -> Result<String, RegistryError> {
        let manifest = factory.manifest();
        describe_manifest(&manifest, "")?;
        let id = manifest.tool_id.clone();
        let mut local = self.local.write().unwrap();
        if local.contains_key(&id) {
            return Err(RegistryError::DuplicateToolId(id));
        }
        local.insert(id.clone(), factory.clone());
        self.runtimes.write().unwrap().entry(id.clone()).or_insert(factory);
        Ok(id)
    }

    pub fn fetch_plugin(&self, raw_url: &str) -> Result<PluginArtifact, RegistryError> {
        let parsed = url::Url::parse(raw_url).map_err(|_| RegistryError::InvalidUrl(raw_url.into()))?;
        match parsed.scheme() {
            "local" => {
                let id = parsed.path();
                let factory = self
                    .local
                    .read()
                    .unwrap()
                    .get(id)
                    .cloned()
                    .ok_or_else(|| RegistryError::UnknownLocalTool(id.into()))?;
                Ok(PluginArtifact::from_bytes(
                    raw_url,
                    package_artifact(id, &factory.manifest()),
                ))
            }
            "http" | "https" => {
                let mut resp = self
                    .agent
                    .get(raw_url)
                    .call()
                    .map_err(|e| RegistryError::NetworkUnreachable(e.to_string()))?;
                let status = resp.status().as_u16();
                if status != 200 {
                    return Err(RegistryError::HttpStatus(status));
                }
                let bytes = resp
                    .body_mut()
                    .read_to_vec()
                    .map_err(|e| RegistryError::NetworkUnreachable(e.to_string()))?;
                if bytes.is_empty() {
                    return Err(RegistryError::EmptyBody);
                }
                Ok(PluginArtifact::from_bytes(raw_url, bytes))
            }
            _ => Err(RegistryError::InvalidUrl(raw_url.into())),
        }
    }

    /// Fetch and describe in one step.
    pub fn resolve(&self, url: &str) -> Result<ResolvedTool, RegistryError> {
        let artifact = self.fetch_plugin(url)?;
        let (descriptor, raw) = describe_tool(&artifact)?;
        Ok(ResolvedTool {
            artifact,
            descriptor,
            raw,
        })
    }
}
