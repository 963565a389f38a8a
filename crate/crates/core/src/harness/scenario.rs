use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::HarnessError;
use crate::contract::ToolNetwork;
use crate::engine::{lookup, MAX_CASCADE_DEPTH};
use crate::host::{HostConfig, PluginHost};
use crate::model::{ActivityDefinition, Binding, Trace, TraceKind};
use crate::registry::ToolRegistry;
use crate::server::{ActivityServer, ActivityState, ServerConfig};
use crate::tools::example_registry;
use crate::wire::{InProcessLink, ServerLink, TcpFront, TcpLink};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DefinitionRef {
    /// Path relative to the script file.
    Path(String),
    Inline(Box<ActivityDefinition>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    PhaseIs(String),
    CommandDispatched {
        slot: String,
        command: String,
    },
    /// `field` is a dotted path into the tool client's state. Without a
    /// user, every client of the slot must match.
    ToolState {
        slot: String,
        field: String,
        equals: Value,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        user: Option<String>,
    },
    EventCount {
        event: String,
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum StepAction {
    Join {
        user: String,
        role: String,
    },
    UserAction {
        user: String,
        slot: String,
        op: String,
        #[serde(default)]
        args: Map<String, Value>,
        #[serde(default)]
        expect_rejected: bool,
    },
    AddBinding {
        binding: Binding,
    },
    RemoveBinding {
        binding_id: String,
    },
    Expect {
        predicate: Predicate,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub at: u64,
    #[serde(flatten)]
    pub action: StepAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub name: String,
    pub definition: DefinitionRef,
    #[serde(default)]
    pub steps: Vec<Step>,
}

impl ScenarioScript {
    pub fn load(path: &Path) -> Result<(Self, PathBuf), HarnessError> {
        let raw = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
        let script: ScenarioScript = serde_json::from_str(&raw)
            .map_err(|e| HarnessError::Parse(path.display().to_string(), e.to_string()))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((script, dir))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if let Some(w) = self.steps.windows(2).find(|w| w[1].at < w[0].at) {
            return Err(HarnessError::InvalidScript(format!(
                "tick {} follows tick {}",
                w[1].at, w[0].at
            )));
        }
        Ok(())
    }

    pub fn resolve_definition(&self, base: &Path) -> Result<ActivityDefinition, HarnessError> {
        match &self.definition {
            DefinitionRef::Inline(d) => Ok((**d).clone()),
            DefinitionRef::Path(p) => load_definition(&base.join(p)),
        }
    }
}

pub fn load_definition(path: &Path) -> Result<ActivityDefinition, HarnessError> {
    let raw = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
    serde_json::from_str(&raw).map_err(|e| HarnessError::Parse(path.display().to_string(), e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Inprocess,
    Sockets,
}

impl std::str::FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inprocess" => Ok(RunMode::Inprocess),
            "sockets" => Ok(RunMode::Sockets),
            other => Err(format!("unknown mode `{other}` (inprocess | sockets)")),
        }
    }
}

#[derive(Clone)]
pub struct RunOptions {
    pub mode: RunMode,
    /// Wall-clock budget for reaching quiescence after one tick.
    pub budget: Duration,
    pub registry: Option<Arc<ToolRegistry>>,
    pub max_cascade_depth: u32,
    pub host: HostConfig,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            mode: RunMode::Inprocess,
            budget: Duration::from_secs(5),
            registry: None,
            max_cascade_depth: MAX_CASCADE_DEPTH,
            host: HostConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpectResult {
    pub step: usize,
    pub at: u64,
    pub predicate: Predicate,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub instance_id: String,
    pub trace: Trace,
    pub expects: Vec<ExpectResult>,
    pub snapshot: ActivityState,
    /// Final tool client state per user and slot.
    pub tool_states: BTreeMap<String, BTreeMap<String, Value>>,
}

impl ScenarioRun {
    pub fn passed(&self) -> bool {
        self.expects.iter().all(|e| e.passed)
    }
}

/// A live system under test: one server, one host per joined user.
pub struct Rig {
    pub server: Arc<ActivityServer>,
    pub registry: Arc<ToolRegistry>,
    pub network: Arc<ToolNetwork>,
    pub instance_id: String,
    pub hosts: BTreeMap<String, PluginHost>,
    mode: RunMode,
    host_config: HostConfig,
    front: Option<TcpFront>,
    budget: Duration,
}

impl Rig {
    pub fn start(def: ActivityDefinition, opts: &RunOptions) -> Result<Self, HarnessError> {
        let registry = opts.registry.clone().unwrap_or_else(|| Arc::new(example_registry()));
        let server = Arc::new(ActivityServer::new(
            registry,
            ServerConfig {
                max_cascade_depth: opts.max_cascade_depth,
            },
        ));
        Self::on_server(server, def, opts)
    }

    /// Creates the instance on an existing server, e.g. one that also serves
    /// the console API.
    pub fn on_server(server: Arc<ActivityServer>, def: ActivityDefinition, opts: &RunOptions) -> Result<Self, HarnessError> {
        let registry = server.registry().clone();
        let instance_id = server.create_activity(def)?;
        let front = match opts.mode {
            RunMode::Inprocess => None,
            RunMode::Sockets => Some(
                TcpFront::bind(server.clone(), "127.0.0.1:0")
                    .map_err(|e| HarnessError::Io("tcp front".into(), e))?,
            ),
        };
        Ok(Self {
            server,
            registry,
            network: Arc::new(ToolNetwork::new()),
            instance_id,
            hosts: BTreeMap::new(),
            mode: opts.mode,
            host_config: opts.host,
            front,
            budget: opts.budget,
        })
    }

    fn link(&self) -> Result<Box<dyn ServerLink>, HarnessError> {
        Ok(match (&self.mode, &self.front) {
            (RunMode::Sockets, Some(front)) => Box::new(TcpLink::connect(front.local_addr())?),
            _ => Box::new(InProcessLink::new(self.server.clone())),
        })
    }

    pub fn join(&mut self, user: &str, role: &str) -> Result<(), HarnessError> {
        if !self.hosts.contains_key(user) {
            let host = PluginHost::connect(
                user,
                self.registry.clone(),
                self.network.clone(),
                self.link()?,
                self.host_config,
            )
            .map_err(|e| HarnessError::host(user, e))?;
            self.hosts.insert(user.into(), host);
        }
        let id = self.instance_id.clone();
        let host = self.hosts.get_mut(user).expect("host just created");
        host.join(&id, role).map_err(|e| HarnessError::host(user, e))?;
        Ok(())
    }

    pub fn host(&mut self, user: &str) -> Result<&mut PluginHost, HarnessError> {
        self.hosts
            .get_mut(user)
            .ok_or_else(|| HarnessError::UnknownUser(user.into()))
    }

    /// Pumps every host until nothing is pending anywhere.
    pub fn quiesce(&mut self, at: u64) -> Result<(), HarnessError> {
        let start = Instant::now();
        loop {
            let mut progress = false;
            for (user, host) in self.hosts.iter_mut() {
                progress |= host.pump().map_err(|e| HarnessError::host(user, e))?;
            }
            let idle = self.hosts.values().all(PluginHost::is_idle) && !self.server.has_pending_commands();
            if !progress && idle {
                return Ok(());
            }
            if start.elapsed() > self.budget {
                return Err(HarnessError::ScenarioTimeout {
                    at,
                    budget: self.budget,
                });
            }
        }
    }

    pub fn check(&mut self, predicate: &Predicate) -> Result<(bool, String), HarnessError> {
        let id = self.instance_id.clone();
        Ok(match predicate {
            Predicate::PhaseIs(phase) => {
                let now = self.server.snapshot(&id)?.phase;
                (&now == phase, format!("phase is `{now}`"))
            }
            Predicate::CommandDispatched { slot, command } => {
                let n = self.server.trace(&id)?.count(|k| {
                    matches!(k, TraceKind::CommandDispatched { command: c, .. }
                        if &c.slot_id == slot && &c.command_name == command)
                });
                (n > 0, format!("{n} dispatch(es) of {slot}.{command}"))
            }
            Predicate::EventCount { event, count } => {
                let n = self.server.trace(&id)?.count(|k| {
                    matches!(k, TraceKind::EventReceived { event: e } if &e.event_name == event)
                });
                (n == *count, format!("{n} `{event}` event(s) received"))
            }
            Predicate::ToolState {
                slot,
                field,
                equals,
                user,
            } => {
                let mut seen = Vec::new();
                for (u, host) in self.hosts.iter_mut() {
                    if user.as_ref().is_some_and(|want| want != u) {
                        continue;
                    }
                    if let Some(state) = host.tool_state(&id, slot) {
                        let v = state
                            .as_object()
                            .and_then(|o| lookup(o, field))
                            .cloned()
                            .unwrap_or(Value::Null);
                        seen.push((u.clone(), v));
                    }
                }
                let ok = !seen.is_empty() && seen.iter().all(|(_, v)| v == equals);
                let detail = seen
                    .iter()
                    .map(|(u, v)| format!("{u}: {slot}.{field}={v}"))
                    .collect::<Vec<_>>()
                    .join(", ");
                (ok, if detail.is_empty() { format!("no client runs `{slot}`") } else { detail })
            }
        })
    }

    pub fn tool_states(&mut self) -> BTreeMap<String, BTreeMap<String, Value>> {
        let id = self.instance_id.clone();
        let mut out = BTreeMap::new();
        for (user, host) in self.hosts.iter_mut() {
            let slots: Vec<String> = host.refs(&id).into_iter().map(|r| r.slot_id).collect();
            let states = slots
                .into_iter()
                .filter_map(|s| host.tool_state(&id, &s).map(|v| (s, v)))
                .collect();
            out.insert(user.clone(), states);
        }
        out
    }
}

pub fn run_scenario(script: &ScenarioScript, base: &Path, opts: &RunOptions) -> Result<ScenarioRun, HarnessError> {
    script.validate()?;
    let def = script.resolve_definition(base)?;
    let mut rig = Rig::start(def, opts)?;
    let mut expects = Vec::new();
    let mut tick = None;
    for (i, step) in script.steps.iter().enumerate() {
        if tick.is_some_and(|t| t != step.at) {
            rig.quiesce(tick.unwrap_or_default())?;
        }
        tick = Some(step.at);
        let id = rig.instance_id.clone();
        match &step.action {
            StepAction::Join { user, role } => rig.join(user, role)?,
            StepAction::UserAction {
                user,
                slot,
                op,
                args,
                expect_rejected,
            } => {
                let result = rig.host(user)?.user_action(&id, slot, op, args);
                match (result, expect_rejected) {
                    (Ok(_), false) | (Err(_), true) => {}
                    (Ok(_), true) => {
                        return Err(HarnessError::UnexpectedOutcome {
                            step: i,
                            detail: format!("{user}: {slot}.{op} succeeded but was expected to be rejected"),
                        })
                    }
                    (Err(e), false) => {
                        return Err(HarnessError::UnexpectedOutcome {
                            step: i,
                            detail: format!("{user}: {slot}.{op} failed: {e}"),
                        })
                    }
                }
            }
            StepAction::AddBinding { binding } => {
                rig.server.add_live_binding(&id, binding.clone())?;
            }
            StepAction::RemoveBinding { binding_id } => rig.server.remove_live_binding(&id, binding_id)?,
            StepAction::Expect { predicate } => {
                rig.quiesce(step.at)?;
                let (passed, detail) = rig.check(predicate)?;
                expects.push(ExpectResult {
                    step: i,
                    at: step.at,
                    predicate: predicate.clone(),
                    passed,
                    detail,
                });
            }
        }
    }
    rig.quiesce(tick.unwrap_or_default())?;
    let id = rig.instance_id.clone();
    Ok(ScenarioRun {
        trace: rig.server.trace(&id)?,
        snapshot: rig.server.snapshot(&id)?,
        tool_states: rig.tool_states(),
        instance_id: id,
        expects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn steps_read_flat() {
        let step: Step = serde_json::from_value(json!({
            "at": 2, "action": "user_action", "user": "bob", "slot": "vote",
            "op": "propose_motion", "args": {"motion": "m"}
        }))
        .unwrap();
        assert_eq!(step.at, 2);
        assert!(matches!(step.action, StepAction::UserAction { expect_rejected: false, .. }));
        let p: Predicate = serde_json::from_value(json!({"phase_is": "open"})).unwrap();
        assert_eq!(p, Predicate::PhaseIs("open".into()));
    }

    #[test]
    fn ticks_must_not_go_back() {
        let script: ScenarioScript = serde_json::from_value(json!({
            "name": "bad",
            "definition": "x.json",
            "steps": [
                {"at": 2, "action": "join", "user": "a", "role": "r"},
                {"at": 1, "action": "join", "user": "b", "role": "r"}
            ]
        }))
        .unwrap();
        assert!(matches!(script.validate(), Err(HarnessError::InvalidScript(_))));
    }
}
