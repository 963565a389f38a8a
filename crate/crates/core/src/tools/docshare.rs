//! Shared document viewer. The server keeps an append-only operation log;
//! clients remember how far they have read and pull the tail on demand.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde_json::{json, Map, Value};

use super::{check_op, is_integration, payload};
use crate::contract::{
    arg_str, EventSink, InstantiateContext, ToolError, ToolFactory, ToolInstance, ToolManifest,
};
use crate::model::{EventSignature, OperationSignature, Param, SemanticType};

pub struct DocShare;

#[derive(Debug, Clone, PartialEq, Eq)]
enum DocOp {
    Join(String),
    Leave(String),
    SetPresenter(String),
    Replace { by: String, content: String },
}

#[derive(Default)]
struct DocLog {
    ops: Vec<DocOp>,
}

#[derive(Debug, Clone, Default)]
struct DocView {
    members: Vec<String>,
    presenter: Option<String>,
    content: String,
    revision: u64,
}

impl DocView {
    fn apply(&mut self, op: &DocOp) {
        match op {
            DocOp::Join(u) => {
                if !self.members.contains(u) {
                    self.members.push(u.clone());
                }
            }
            DocOp::Leave(u) => {
                self.members.retain(|m| m != u);
                if self.presenter.as_ref() == Some(u) {
                    self.presenter = None;
                }
            }
            DocOp::SetPresenter(u) => self.presenter = Some(u.clone()),
            DocOp::Replace { content, .. } => {
                self.content = content.clone();
                self.revision += 1;
            }
        }
    }
}

impl ToolFactory for DocShare {
    fn manifest(&self) -> ToolManifest {
        use SemanticType::*;
        ToolManifest {
            tool_id: "doc-share".into(),
            version: "0.3.0".into(),
            activity_kind: "document-sharing".into(),
            roles: vec!["presenter".into(), "viewer".into()],
            operations: vec![
                OperationSignature::new("ia_set_presenter", vec![Param::new("user", UserRef)], None),
                OperationSignature::new("edit", vec![Param::new("content", String)], Some(Integer)),
                OperationSignature::new("view", vec![], Some(String)),
            ],
            events: vec![EventSignature::new("presenter_changed", [("user", UserRef)])],
        }
    }

    fn instantiate(&self, ctx: InstantiateContext<'_>) -> Result<Box<dyn ToolInstance>, ToolError> {
        let log = ctx
            .network
            .server(&format!("doc-share/{}", ctx.session), || Mutex::new(DocLog::default()));
        let role = ctx.assigned_role.unwrap_or("viewer").to_string();
        {
            let mut l = log.lock().unwrap();
            l.ops.push(DocOp::Join(ctx.user_id.into()));
            if role == "presenter" {
                l.ops.push(DocOp::SetPresenter(ctx.user_id.into()));
            }
        }
        let mut client = DocClient {
            manifest: self.manifest(),
            user: ctx.user_id.into(),
            role,
            log,
            cursor: 0,
            view: DocView::default(),
            sink: None,
            live: true,
        };
        client.pull();
        Ok(Box::new(client))
    }
}

struct DocClient {
    manifest: ToolManifest,
    user: String,
    role: String,
    log: Arc<Mutex<DocLog>>,
    cursor: usize,
    view: DocView,
    sink: Option<EventSink>,
    live: bool,
}

impl DocClient {
    fn pull(&mut self) {
        let tail: Vec<DocOp> = self.log.lock().unwrap().ops[self.cursor..].to_vec();
        self.cursor += tail.len();
        for op in &tail {
            self.view.apply(op);
        }
    }

    fn run(&mut self, op: &str, args: &Map<String, Value>) -> Result<Value, ToolError> {
        if !self.live {
            return Err(ToolError::rejected("shut_down", "doc-share client closed"));
        }
        check_op(&self.manifest, op, args)?;
        self.pull();
        let result = match op {
            "ia_set_presenter" => {
                let user = arg_str(args, "user")?;
                if !self.view.members.iter().any(|m| m == user) {
                    return Err(ToolError::rejected("unknown_user", user));
                }
                if self.view.presenter.as_deref() != Some(user) {
                    self.log.lock().unwrap().ops.push(DocOp::SetPresenter(user.into()));
                    if let Some(sink) = &self.sink {
                        sink.emit("presenter_changed", payload(&[("user", json!(user))]), Some(&self.user));
                    }
                }
                Value::Null
            }
            "edit" => {
                if self.view.presenter.as_deref() != Some(&self.user) {
                    return Err(ToolError::rejected("not_presenter", "only the presenter edits"));
                }
                self.log.lock().unwrap().ops.push(DocOp::Replace {
                    by: self.user.clone(),
                    content: arg_str(args, "content")?.into(),
                });
                self.pull();
                json!(self.view.revision)
            }
            "view" => json!(format!(
                "[doc-share:{} r{}] {}",
                self.role, self.view.revision, self.view.content
            )),
            other => return Err(ToolError::UnknownOperation(other.into())),
        };
        self.pull();
        Ok(result)
    }

    fn last_editor(&self) -> Option<String> {
        self.log.lock().unwrap().ops[..self.cursor].iter().rev().find_map(|op| match op {
            DocOp::Replace { by, .. } => Some(by.clone()),
            _ => None,
        })
    }
}

impl ToolInstance for DocClient {
    fn invoke(&mut self, command: &str, args: &Map<String, Value>) -> Result<Value, ToolError> {
        if !is_integration(command) {
            return Err(ToolError::UnknownOperation(command.into()));
        }
        self.run(command, args)
    }

    fn user_action(&mut self, op: &str, args: &Map<String, Value>) -> Result<Value, ToolError> {
        self.run(op, args)
    }

    fn subscribe(&mut self, sink: EventSink) {
        self.sink = Some(sink);
    }

    fn state(&mut self) -> Value {
        self.pull();
        let mut s = BTreeMap::new();
        s.insert("user", json!(self.user));
        s.insert("role", json!(self.role));
        s.insert("presenter", json!(self.view.presenter));
        s.insert("members", json!(self.view.members));
        s.insert("content", json!(self.view.content));
        s.insert("revision", json!(self.view.revision));
        s.insert("last_editor", json!(self.last_editor()));
        json!(s)
    }

    fn shutdown(&mut self) {
        if self.live {
            self.log.lock().unwrap().ops.push(DocOp::Leave(self.user.clone()));
            if let Some(sink) = &self.sink {
                sink.close();
            }
            self.live = false;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::ToolNetwork;

    fn client(net: &ToolNetwork, user: &str, role: Option<&str>) -> (Box<dyn ToolInstance>, EventSink) {
        let params = BTreeMap::new();
        let mut c = DocShare
            .instantiate(InstantiateContext {
                user_id: user,
                session: "s",
                instance_params: &params,
                assigned_role: role,
                network: net,
            })
            .unwrap();
        let sink = EventSink::new();
        c.subscribe(sink.clone());
        (c, sink)
    }

    #[test]
    fn presenter_edits_viewers_follow() {
        let net = ToolNetwork::new();
        let (mut p, _) = client(&net, "prof", Some("presenter"));
        let (mut s, _) = client(&net, "stud", Some("viewer"));
        assert_eq!(s.state()["presenter"], json!("prof"));
        assert_eq!(p.user_action("edit", &payload(&[("content", json!("slide 1"))])).unwrap(), json!(1));
        assert_eq!(s.state()["content"], json!("slide 1"));
        assert_eq!(s.state()["last_editor"], json!("prof"));
        let err = s.user_action("edit", &payload(&[("content", json!("x"))])).unwrap_err();
        assert_eq!(err.code(), "not_presenter");
    }

    #[test]
    fn handing_over_presentation() {
        let net = ToolNetwork::new();
        let (mut p, sink) = client(&net, "prof", Some("presenter"));
        let (mut s, _) = client(&net, "stud", None);
        p.invoke("ia_set_presenter", &payload(&[("user", json!("stud"))])).unwrap();
        p.invoke("ia_set_presenter", &payload(&[("user", json!("stud"))])).unwrap();
        assert_eq!(sink.drain().len(), 1);
        s.user_action("edit", &payload(&[("content", json!("mine"))])).unwrap();
        assert_eq!(p.state()["content"], json!("mine"));
        let err = p.invoke("ia_set_presenter", &payload(&[("user", json!("ghost"))])).unwrap_err();
        assert_eq!(err.code(), "unknown_user");
    }
}
