//! Pure binding evaluation.
//!
//! Given the state of an activity instance and one trigger occurrence, compute
//! the ordered effects. Nothing here mutates state; the activity server
//! applies the effects and feeds follow-up triggers back in at `depth + 1`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{
    Action, ActivityDefinition, ActivityInstance, ArgSource, Binding, CompareOp, GuardAtom,
    GuardSubject, ToolDescriptor, Trigger,
};

pub const MAX_CASCADE_DEPTH: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerOccurrence {
    pub source: Trigger,
    pub payload: Map<String, Value>,
    pub actor: Option<String>,
    pub depth: u32,
}

impl TriggerOccurrence {
    pub fn phase_entered(phase: &str, depth: u32) -> Self {
        Self {
            source: Trigger::phase_entered(phase),
            payload: Map::new(),
            actor: None,
            depth,
        }
    }
}

/// Read-only view of the instance state that evaluation depends on.
#[derive(Debug, Clone)]
pub struct EvalScope<'a> {
    pub phase: &'a str,
    /// Evaluation order: definition bindings, then live bindings.
    pub bindings: Vec<&'a Binding>,
    pub participants: &'a BTreeMap<String, String>,
    pub max_depth: u32,
}

impl<'a> EvalScope<'a> {
    pub fn of(instance: &'a ActivityInstance, max_depth: u32) -> Self {
        Self {
            phase: &instance.phase,
            bindings: instance.bindings().collect(),
            participants: &instance.participants,
            max_depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum Effect {
    InvokeCommand {
        binding_id: String,
        slot_id: String,
        command_name: String,
        args: Map<String, Value>,
    },
    TransitionPhase {
        binding_id: String,
        target_phase: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "skip", rename_all = "snake_case")]
pub enum SkipNote {
    GuardFieldMissing {
        binding_id: String,
        path: String,
    },
    ArgResolutionFailed {
        binding_id: String,
        action_index: usize,
        path: String,
    },
}

/// One binding whose source matched the trigger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingEvaluation {
    pub binding_id: String,
    pub passed: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EffectList {
    pub effects: Vec<Effect>,
    pub evaluations: Vec<BindingEvaluation>,
    pub skipped: Vec<SkipNote>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("cascade depth {depth} exceeds limit {limit}")]
    DepthExceeded { depth: u32, limit: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("argument resolution failed at `{path}`")]
pub struct ArgResolutionFailed {
    pub path: String,
}

/// Effects of every matching binding whose guard holds, concatenated in
/// binding order. All bindings see the same pre-state.
pub fn evaluate(scope: &EvalScope<'_>, trigger: &TriggerOccurrence) -> Result<EffectList, EngineError> {
    if trigger.depth > scope.max_depth {
        return Err(EngineError::DepthExceeded {
            depth: trigger.depth,
            limit: scope.max_depth,
        });
    }
    let role = trigger
        .actor
        .as_ref()
        .and_then(|a| scope.participants.get(a))
        .map(String::as_str);

    let mut out = EffectList::default();
    for binding in &scope.bindings {
        if binding.source != trigger.source {
            continue;
        }
        let verdict = match &binding.guard {
            None => Ok(true),
            Some(g) => guard_holds(&g.atoms, scope.phase, &trigger.payload),
        };
        let passed = match verdict {
            Ok(p) => p,
            Err(path) => {
                out.evaluations.push(BindingEvaluation {
                    binding_id: binding.binding_id.clone(),
                    passed: false,
                    note: Some(format!("guard field missing: {path}")),
                });
                out.skipped.push(SkipNote::GuardFieldMissing {
                    binding_id: binding.binding_id.clone(),
                    path,
                });
                continue;
            }
        };
        out.evaluations.push(BindingEvaluation {
            binding_id: binding.binding_id.clone(),
            passed,
            note: None,
        });
        if !passed {
            continue;
        }
        for (index, action) in binding.actions.iter().enumerate() {
            match action {
                Action::TransitionPhase { target_phase } => {
                    out.effects.push(Effect::TransitionPhase {
                        binding_id: binding.binding_id.clone(),
                        target_phase: target_phase.clone(),
                    })
                }
                Action::InvokeCommand {
                    slot_id,
                    command_name,
                    arg_map,
                } => match resolve_args(arg_map, &trigger.payload, trigger.actor.as_deref(), role) {
                    Ok(args) => out.effects.push(Effect::InvokeCommand {
                        binding_id: binding.binding_id.clone(),
                        slot_id: slot_id.clone(),
                        command_name: command_name.clone(),
                        args,
                    }),
                    Err(e) => out.skipped.push(SkipNote::ArgResolutionFailed {
                        binding_id: binding.binding_id.clone(),
                        action_index: index,
                        path: e.path,
                    }),
                },
            }
        }
    }
    Ok(out)
}

/// `Err(path)` when an atom refers to a payload field that is absent.
fn guard_holds(atoms: &[GuardAtom], phase: &str, payload: &Map<String, Value>) -> Result<bool, String> {
    let phase_value = Value::String(phase.to_string());
    let mut all = true;
    for atom in atoms {
        let lhs = match &atom.subject {
            GuardSubject::Phase => &phase_value,
            GuardSubject::Field(path) => lookup(payload, path).ok_or_else(|| path.clone())?,
        };
        all &= compare(lhs, atom.op, &atom.value);
    }
    Ok(all)
}

fn compare(lhs: &Value, op: CompareOp, rhs: &Value) -> bool {
    match op {
        CompareOp::Eq => lhs == rhs,
        CompareOp::Ne => lhs != rhs,
        CompareOp::Lt | CompareOp::Gt => {
            let ord = match (lhs, rhs) {
                (Value::Number(a), Value::Number(b)) => {
                    a.as_f64().zip(b.as_f64()).and_then(|(a, b)| a.partial_cmp(&b))
                }
                (Value::String(a), Value::String(b)) => Some(a.cmp(b)),
                _ => None,
            };
            match (ord, op) {
                (Some(o), CompareOp::Lt) => o.is_lt(),
                (Some(o), CompareOp::Gt) => o.is_gt(),
                _ => false,
            }
        }
    }
}

/// Dotted path lookup into nested payload objects.
pub fn lookup<'v>(payload: &'v Map<String, Value>, path: &str) -> Option<&'v Value> {
    let mut parts = path.split('.');
    let mut cur = payload.get(parts.next()?)?;
    for part in parts {
        cur = cur.as_object()?.get(part)?;
    }
    Some(cur)
}

/// Literals pass through, payload paths are looked up, `actor` and `role`
/// are substituted.
pub fn resolve_args(
    arg_map: &BTreeMap<String, ArgSource>,
    payload: &Map<String, Value>,
    actor: Option<&str>,
    assigned_role: Option<&str>,
) -> Result<Map<String, Value>, ArgResolutionFailed> {
    let mut out = Map::new();
    for (param, source) in arg_map {
        let value = match source {
            ArgSource::Literal { value } => value.clone(),
            ArgSource::Payload { path } => lookup(payload, path)
                .cloned()
                .ok_or_else(|| ArgResolutionFailed {
                    path: format!("payload.{path}"),
                })?,
            ArgSource::Actor => Value::String(
                actor
                    .ok_or_else(|| ArgResolutionFailed {
                        path: "$actor".into(),
                    })?
                    .to_string(),
            ),
            ArgSource::Role => Value::String(
                assigned_role
                    .ok_or_else(|| ArgResolutionFailed {
                        path: "$role".into(),
                    })?
                    .to_string(),
            ),
        };
        out.insert(param.clone(), value);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeEdge {
    pub from: Trigger,
    pub to: Trigger,
    pub bindings: Vec<String>,
}

/// Possible firings between triggers, guards ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeGraph {
    pub nodes: Vec<Trigger>,
    pub edges: Vec<CascadeEdge>,
    /// Elementary cycles, each rotated to start at its earliest node.
    pub cycles: Vec<Vec<Trigger>>,
}

impl CascadeGraph {
    pub fn has_cycles(&self) -> bool {
        !self.cycles.is_empty()
    }

    pub fn has_edge(&self, from: &Trigger, to: &Trigger) -> bool {
        self.edges.iter().any(|e| &e.from == from && &e.to == to)
    }
}

/// Design-time over-approximation of cascades. An edge `t1 -> t2` exists when a
/// binding sourced at `t1` transitions into the phase of `t2`, or invokes a
/// command on a slot whose tool declares the event another binding consumes
/// as `t2`. `tools` maps slot ids to descriptors; slots without one
/// contribute no command edges.
pub fn static_cascade_report(
    def: &ActivityDefinition,
    tools: &BTreeMap<String, ToolDescriptor>,
) -> CascadeGraph {
    let mut graph = CascadeGraph::default();
    let mut index: HashMap<Trigger, usize> = HashMap::new();
    let mut node = |t: &Trigger, graph: &mut CascadeGraph| -> usize {
        *index.entry(t.clone()).or_insert_with(|| {
            graph.nodes.push(t.clone());
            graph.nodes.len() - 1
        })
    };

    let consumed: Vec<&Trigger> = def.bindings.iter().map(|b| &b.source).collect();
    let mut edges: Vec<(usize, usize, Vec<String>)> = Vec::new();
    let mut add_edge = |from: usize, to: usize, binding: &str| {
        match edges.iter_mut().find(|(f, t, _)| *f == from && *t == to) {
            Some((_, _, via)) => {
                if !via.iter().any(|b| b == binding) {
                    via.push(binding.to_string())
                }
            }
            None => edges.push((from, to, vec![binding.to_string()])),
        }
    };

    for b in &def.bindings {
        let from = node(&b.source, &mut graph);
        for action in &b.actions {
            match action {
                Action::TransitionPhase { target_phase } => {
                    let to = node(&Trigger::phase_entered(target_phase), &mut graph);
                    add_edge(from, to, &b.binding_id);
                }
                Action::InvokeCommand { slot_id, .. } => {
                    let Some(d) = tools.get(slot_id) else { continue };
                    for ev in &d.events {
                        let t = Trigger::tool_event(slot_id, &ev.name);
                        if consumed.contains(&&t) {
                            let to = node(&t, &mut graph);
                            add_edge(from, to, &b.binding_id);
                        }
                    }
                }
            }
        }
    }

    let mut adjacency = vec![Vec::new(); graph.nodes.len()];
    for (f, t, _) in &edges {
        adjacency[*f].push(*t);
    }
    graph.cycles = elementary_cycles(&adjacency)
        .into_iter()
        .map(|c| c.into_iter().map(|i| graph.nodes[i].clone()).collect())
        .collect();
    graph.edges = edges
        .into_iter()
        .map(|(f, t, bindings)| CascadeEdge {
            from: graph.nodes[f].clone(),
            to: graph.nodes[t].clone(),
            bindings,
        })
        .collect();
    graph
}

/// Each elementary cycle once, starting from its smallest node index.
pub(crate) fn elementary_cycles(adjacency: &[Vec<usize>]) -> Vec<Vec<usize>> {
    fn walk(
        start: usize,
        at: usize,
        adjacency: &[Vec<usize>],
        path: &mut Vec<usize>,
        on_path: &mut [bool],
        out: &mut Vec<Vec<usize>>,
    ) {
        for &next in &adjacency[at] {
            if next == start {
                out.push(path.clone());
            } else if next > start && !on_path[next] {
                on_path[next] = true;
                path.push(next);
                walk(start, next, adjacency, path, on_path, out);
                path.pop();
                on_path[next] = false;
            }
        }
    }

    let mut out = Vec::new();
    let mut on_path = vec![false; adjacency.len()];
    for start in 0..adjacency.len() {
        let mut path = vec![start];
        on_path[start] = true;
        walk(start, start, adjacency, &mut path, &mut on_path, &mut out);
        on_path[start] = false;
    }
    out
}
