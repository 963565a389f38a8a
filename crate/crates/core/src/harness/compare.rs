use std::collections::HashMap;

use serde::Serialize;
use serde_json::Value;
use uuid::Uuid;

use crate::model::{Trace, TraceEntry};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffLine {
    pub index: usize,
    pub left: Option<Value>,
    pub right: Option<Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TraceDiff {
    pub lines: Vec<DiffLine>,
}

impl TraceDiff {
    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

impl std::fmt::Display for TraceDiff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let show = |v: &Option<Value>| v.as_ref().map_or("-".to_string(), Value::to_string);
        for l in &self.lines {
            writeln!(f, "@{}\n  < {}\n  > {}", l.index, show(&l.left), show(&l.right))?;
        }
        Ok(())
    }
}

/// Entries as comparable values: wall-clock stamps dropped, each uuid
/// replaced by the ordinal of its first appearance in the trace.
pub fn normalize(entries: &[TraceEntry]) -> Vec<Value> {
    let mut ids: HashMap<String, usize> = HashMap::new();
    entries
        .iter()
        .map(|e| {
            let mut v = serde_json::to_value(e).expect("trace entries serialize");
            if let Value::Object(m) = &mut v {
                m.remove("time_ms");
            }
            rename_uuids(&mut v, &mut ids);
            v
        })
        .collect()
}

fn rename_uuids(v: &mut Value, ids: &mut HashMap<String, usize>) {
    match v {
        Value::String(s) => {
            if Uuid::parse_str(s).is_ok() {
                let next = ids.len();
                let n = *ids.entry(s.clone()).or_insert(next);
                *s = format!("uuid#{n}");
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|i| rename_uuids(i, ids)),
        Value::Object(m) => m.values_mut().for_each(|i| rename_uuids(i, ids)),
        _ => {}
    }
}

/// Position-wise difference of two traces, ignoring timestamps and uuids.
pub fn compare_traces(a: &Trace, b: &Trace) -> TraceDiff {
    let (na, nb) = (normalize(&a.entries), normalize(&b.entries));
    let lines = (0..na.len().max(nb.len()))
        .filter_map(|i| {
            let (l, r) = (na.get(i), nb.get(i));
            (l != r).then(|| DiffLine {
                index: i,
                left: l.cloned(),
                right: r.cloned(),
            })
        })
        .collect();
    TraceDiff { lines }
}
