//! The behavioral interface every integrable tool implements.
//!
//! A tool is described without being instantiated ([`ToolFactory::manifest`]),
//! instantiated once per user and slot, piloted through its `ia_` commands,
//! and observed through an [`EventSink`] it is subscribed to. How a tool's
//! client talks to its own server is its own business; the host never sees
//! that traffic.

use std::any::Any;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{EventSignature, OperationSignature};

/// Everything a tool says about itself, before filtering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolManifest {
    pub tool_id: String,
    pub version: String,
    pub activity_kind: String,
    pub roles: Vec<String>,
    /// All client operations, integration commands and user-level ones alike.
    pub operations: Vec<OperationSignature>,
    pub events: Vec<EventSignature>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolError {
    #[error("unknown operation `{0}`")]
    UnknownOperation(String),
    #[error("bad arguments: {0}")]
    BadArgs(String),
    #[error("{code}: {reason}")]
    Rejected { code: String, reason: String },
    /// The instance cannot continue; the host marks it failed.
    #[error("tool failure: {0}")]
    Fatal(String),
}

impl ToolError {
    pub fn rejected(code: &str, reason: impl Into<String>) -> Self {
        ToolError::Rejected {
            code: code.into(),
            reason: reason.into(),
        }
    }

    pub fn code(&self) -> &str {
        match self {
            ToolError::UnknownOperation(_) => "unknown_operation",
            ToolError::BadArgs(_) => "bad_args",
            ToolError::Rejected { code, .. } => code,
            ToolError::Fatal(_) => "tool_failed",
        }
    }
}

/// An event as raised by a tool client.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolEmission {
    pub event_name: String,
    pub payload: Map<String, Value>,
    pub actor: Option<String>,
    pub depth: u32,
}

/// Where a tool instance delivers its integration events.
///
/// Cloning shares the queue. The host stamps the cascade depth before each
/// command invocation; emissions after [`EventSink::close`] are dropped.
#[derive(Debug, Clone)]
pub struct EventSink {
    queue: Arc<Mutex<VecDeque<ToolEmission>>>,
    depth: Arc<AtomicU32>,
    open: Arc<AtomicBool>,
}

impl Default for EventSink {
    fn default() -> Self {
        Self {
            queue: Arc::default(),
            depth: Arc::new(AtomicU32::new(1)),
            open: Arc::new(AtomicBool::new(true)),
        }
    }
}

impl EventSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn emit(&self, event_name: &str, payload: Map<String, Value>, actor: Option<&str>) {
        if !self.open.load(Ordering::SeqCst) {
            return;
        }
        self.queue.lock().unwrap().push_back(ToolEmission {
            event_name: event_name.into(),
            payload,
            actor: actor.map(str::to_string),
            depth: self.depth.load(Ordering::SeqCst),
        });
    }

    pub fn set_depth(&self, depth: u32) {
        self.depth.store(depth, Ordering::SeqCst);
    }

    pub fn drain(&self) -> Vec<ToolEmission> {
        self.queue.lock().unwrap().drain(..).collect()
    }

    pub fn close(&self) {
        self.open.store(false, Ordering::SeqCst);
    }

    pub fn is_open(&self) -> bool {
        self.open.load(Ordering::SeqCst)
    }
}

/// Stand-in for the network where tools keep their own servers: one shared
/// object per key, created on first use.
#[derive(Default)]
pub struct ToolNetwork {
    servers: Mutex<HashMap<String, Arc<dyn Any + Send + Sync>>>,
}

impl std::fmt::Debug for ToolNetwork {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let keys: Vec<String> = self.servers.lock().unwrap().keys().cloned().collect();
        f.debug_struct("ToolNetwork").field("servers", &keys).finish()
    }
}

impl ToolNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics if `key` already holds a server of another type.
    pub fn server<T, F>(&self, key: &str, make: F) -> Arc<T>
    where
        T: Any + Send + Sync,
        F: FnOnce() -> T,
    {
        let mut servers = self.servers.lock().unwrap();
        let entry = servers
            .entry(key.to_string())
            .or_insert_with(|| Arc::new(make()) as Arc<dyn Any + Send + Sync>);
        entry
            .clone()
            .downcast::<T>()
            .unwrap_or_else(|_| panic!("tool server `{key}` has a different type"))
    }
}

pub struct InstantiateContext<'a> {
    pub user_id: &'a str,
    /// Identifies the shared tool session, e.g. one forum per activity slot.
    pub session: &'a str,
    pub instance_params: &'a BTreeMap<String, String>,
    pub assigned_role: Option<&'a str>,
    pub network: &'a ToolNetwork,
}

pub trait ToolFactory: Send + Sync {
    fn manifest(&self) -> ToolManifest;

    fn instantiate(&self, ctx: InstantiateContext<'_>) -> Result<Box<dyn ToolInstance>, ToolError>;
}

pub trait ToolInstance: Send {
    /// Runs an integration command.
    fn invoke(&mut self, command: &str, args: &Map<String, Value>) -> Result<Value, ToolError>;

    /// Runs an ordinary user-level operation, as if from the tool's own UI.
    fn user_action(&mut self, op: &str, args: &Map<String, Value>) -> Result<Value, ToolError>;

    fn subscribe(&mut self, sink: EventSink);

    /// The client's local view, as JSON.
    fn state(&mut self) -> Value;

    fn shutdown(&mut self);
}

pub(crate) fn arg_str<'a>(args: &'a Map<String, Value>, name: &str) -> Result<&'a str, ToolError> {
    args.get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| ToolError::BadArgs(format!("`{name}` must be a string")))
}
