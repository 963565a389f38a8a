//! Threaded forum. Clients send requests to the forum server and receive its
//! answers directly; state changes are pushed to every connected client as
//! notices.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use serde_json::{json, Map, Value};

use super::{check_op, is_integration, payload};
use crate::contract::{
    arg_str, EventSink, InstantiateContext, ToolError, ToolFactory, ToolInstance, ToolManifest,
};
use crate::model::{EventSignature, OperationSignature, Param, SemanticType};

pub struct Forum;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ForumMessage {
    pub author: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ForumState {
    pub accepting: bool,
    pub threads: BTreeMap<String, Vec<ForumMessage>>,
}

impl Default for ForumState {
    fn default() -> Self {
        Self {
            accepting: true,
            threads: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
enum Notice {
    Posted { thread: String, message: ForumMessage },
    Accepting(bool),
}

type Outlet = Arc<Mutex<VecDeque<Notice>>>;

enum Request {
    Join { member: String, outlet: Outlet },
    Leave { member: String },
    Post { thread: String, message: ForumMessage },
    SetAccepting(bool),
}

enum Response {
    Joined(ForumState),
    Done,
    Changed(bool),
    Rejected(&'static str),
}

#[derive(Default)]
struct ForumServer {
    state: ForumState,
    members: BTreeMap<String, Outlet>,
}

impl ForumServer {
    fn handle(&mut self, req: Request) -> Response {
        match req {
            Request::Join { member, outlet } => {
                self.members.insert(member, outlet);
                Response::Joined(self.state.clone())
            }
            Request::Leave { member } => {
                self.members.remove(&member);
                Response::Done
            }
            Request::Post { thread, message } => {
                if !self.state.accepting {
                    return Response::Rejected("discussion_closed");
                }
                self.state
                    .threads
                    .entry(thread.clone())
                    .or_default()
                    .push(message.clone());
                self.notify(Notice::Posted { thread, message });
                Response::Done
            }
            Request::SetAccepting(flag) => {
                let changed = self.state.accepting != flag;
                if changed {
                    self.state.accepting = flag;
                    self.notify(Notice::Accepting(flag));
                }
                Response::Changed(changed)
            }
        }
    }

    fn notify(&self, notice: Notice) {
        for outlet in self.members.values() {
            outlet.lock().unwrap().push_back(notice.clone());
        }
    }
}

impl ToolFactory for Forum {
    fn manifest(&self) -> ToolManifest {
        use SemanticType::*;
        ToolManifest {
            tool_id: "forum".into(),
            version: "1.2.0".into(),
            activity_kind: "asynchronous-discussion".into(),
            roles: vec!["moderator".into(), "participant".into()],
            operations: vec![
                OperationSignature::new("ia_stop_discussion", vec![], None),
                OperationSignature::new("render_widget", vec![], Some(String)),
                OperationSignature::new("ia_resume_discussion", vec![], None),
                OperationSignature::new(
                    "post",
                    vec![Param::new("thread", String), Param::new("text", String)],
                    None,
                ),
                OperationSignature::new("list_threads", vec![], Some(Json)),
            ],
            events: vec![
                EventSignature::new(
                    "message_posted",
                    [("thread", String), ("author", UserRef), ("text", String)],
                ),
                EventSignature::new("discussion_stopped", [("stopped_by", UserRef)]),
            ],
        }
    }

    fn instantiate(&self, ctx: InstantiateContext<'_>) -> Result<Box<dyn ToolInstance>, ToolError> {
        let server = ctx
            .network
            .server(&format!("forum/{}", ctx.session), || Mutex::new(ForumServer::default()));
        let outlet = Outlet::default();
        let replica = match server.lock().unwrap().handle(Request::Join {
            member: ctx.user_id.into(),
            outlet: outlet.clone(),
        }) {
            Response::Joined(s) => s,
            _ => return Err(ToolError::Fatal("forum server refused join".into())),
        };
        Ok(Box::new(ForumClient {
            manifest: self.manifest(),
            user: ctx.user_id.into(),
            role: ctx.assigned_role.unwrap_or("participant").into(),
            server,
            outlet,
            replica,
            sink: None,
            live: true,
        }))
    }
}

struct ForumClient {
    manifest: ToolManifest,
    user: String,
    role: String,
    server: Arc<Mutex<ForumServer>>,
    outlet: Outlet,
    replica: ForumState,
    sink: Option<EventSink>,
    live: bool,
}

impl ForumClient {
    fn call(&self, req: Request) -> Response {
        self.server.lock().unwrap().handle(req)
    }

    fn sync(&mut self) {
        let notices: Vec<Notice> = self.outlet.lock().unwrap().drain(..).collect();
        for n in notices {
            match n {
                Notice::Posted { thread, message } => {
                    self.replica.threads.entry(thread).or_default().push(message)
                }
                Notice::Accepting(flag) => self.replica.accepting = flag,
            }
        }
    }

    fn emit(&self, event: &str, data: Map<String, Value>) {
        if let Some(sink) = &self.sink {
            sink.emit(event, data, Some(&self.user));
        }
    }

    fn run(&mut self, op: &str, args: &Map<String, Value>) -> Result<Value, ToolError> {
        if !self.live {
            return Err(ToolError::rejected("shut_down", "forum client closed"));
        }
        check_op(&self.manifest, op, args)?;
        self.sync();
        match op {
            "ia_stop_discussion" | "ia_resume_discussion" => {
                let stop = op == "ia_stop_discussion";
                if let Response::Changed(true) = self.call(Request::SetAccepting(!stop)) {
                    if stop {
                        self.emit(
                            "discussion_stopped",
                            payload(&[("stopped_by", json!(self.user))]),
                        );
                    }
                }
                self.sync();
                Ok(Value::Null)
            }
            "post" => {
                if !self.replica.accepting {
                    return Err(ToolError::rejected("discussion_closed", "discussion is closed"));
                }
                let thread = arg_str(args, "thread")?.to_string();
                let text = arg_str(args, "text")?.to_string();
                let message = ForumMessage {
                    author: self.user.clone(),
                    text: text.clone(),
                };
                match self.call(Request::Post {
                    thread: thread.clone(),
                    message,
                }) {
                    Response::Rejected(code) => Err(ToolError::rejected(code, "post refused")),
                    _ => {
                        self.emit(
                            "message_posted",
                            payload(&[
                                ("thread", json!(thread)),
                                ("author", json!(self.user)),
                                ("text", json!(text)),
                            ]),
                        );
                        self.sync();
                        Ok(Value::Null)
                    }
                }
            }
            "render_widget" => Ok(json!(format!(
                "[forum:{}] {} thread(s), {}",
                self.role,
                self.replica.threads.len(),
                if self.replica.accepting { "open" } else { "closed" }
            ))),
            "list_threads" => Ok(serde_json::to_value(&self.replica.threads).unwrap()),
            other => Err(ToolError::UnknownOperation(other.into())),
        }
    }
}

impl ToolInstance for ForumClient {
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
        self.sync();
        json!({
            "user": self.user,
            "role": self.role,
            "accepting": self.replica.accepting,
            "threads": self.replica.threads,
        })
    }

    fn shutdown(&mut self) {
        if self.live {
            self.call(Request::Leave {
                member: self.user.clone(),
            });
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
    use proptest::prelude::*;

    fn client(net: &ToolNetwork, user: &str) -> (Box<dyn ToolInstance>, EventSink) {
        let params = BTreeMap::new();
        let mut c = Forum
            .instantiate(InstantiateContext {
                user_id: user,
                session: "s",
                instance_params: &params,
                assigned_role: None,
                network: net,
            })
            .unwrap();
        let sink = EventSink::new();
        c.subscribe(sink.clone());
        (c, sink)
    }

    fn post(text: &str) -> Map<String, Value> {
        payload(&[("thread", json!("general")), ("text", json!(text))])
    }

    #[test]
    fn stop_closes_every_client() {
        let net = ToolNetwork::new();
        let (mut a, sink) = client(&net, "alice");
        let (mut b, _) = client(&net, "bob");
        let (mut c, _) = client(&net, "carol");
        b.user_action("post", &post("hi")).unwrap();

        a.invoke("ia_stop_discussion", &Map::new()).unwrap();
        for cl in [&mut a, &mut b, &mut c] {
            assert_eq!(cl.state()["accepting"], json!(false));
            let err = cl.user_action("post", &post("late")).unwrap_err();
            assert_eq!(err.code(), "discussion_closed");
        }
        let events = sink.drain();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].event_name, "discussion_stopped");
    }

    #[test]
    fn stop_twice_emits_once() {
        let net = ToolNetwork::new();
        let (mut a, sink) = client(&net, "alice");
        a.invoke("ia_stop_discussion", &Map::new()).unwrap();
        let before = a.state();
        a.invoke("ia_stop_discussion", &Map::new()).unwrap();
        assert_eq!(a.state(), before);
        assert_eq!(sink.drain().len(), 1);
    }

    #[test]
    fn resume_then_post() {
        let net = ToolNetwork::new();
        let (mut a, sink) = client(&net, "alice");
        a.invoke("ia_stop_discussion", &Map::new()).unwrap();
        a.invoke("ia_resume_discussion", &Map::new()).unwrap();
        a.user_action("post", &post("back")).unwrap();
        let names: Vec<_> = sink.drain().into_iter().map(|e| e.event_name).collect();
        assert_eq!(names, ["discussion_stopped", "message_posted"]);
    }

    #[test]
    fn user_ops_are_not_commands() {
        let net = ToolNetwork::new();
        let (mut a, _) = client(&net, "alice");
        assert!(matches!(a.invoke("post", &post("x")), Err(ToolError::UnknownOperation(_))));
        assert!(matches!(
            a.user_action("post", &payload(&[("thread", json!(1)), ("text", json!("x"))])),
            Err(ToolError::BadArgs(_))
        ));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Post(usize, String),
        Stop(usize),
        Resume(usize),
    }

    fn arb_op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0..3usize, "[a-z]{1,6}").prop_map(|(c, t)| Op::Post(c, t)),
            (0..3usize).prop_map(Op::Stop),
            (0..3usize).prop_map(Op::Resume),
        ]
    }

    proptest! {
        #[test]
        fn clients_converge(ops in prop::collection::vec(arb_op(), 0..30)) {
            let net = ToolNetwork::new();
            let mut clients: Vec<_> = ["a", "b", "c"].iter().map(|u| client(&net, u).0).collect();
            for op in ops {
                match op {
                    Op::Post(i, t) => { let _ = clients[i].user_action("post", &post(&t)); }
                    Op::Stop(i) => { clients[i].invoke("ia_stop_discussion", &Map::new()).unwrap(); }
                    Op::Resume(i) => { clients[i].invoke("ia_resume_discussion", &Map::new()).unwrap(); }
                }
            }
            let views: Vec<_> = clients
                .iter_mut()
                .map(|c| { let s = c.state(); (s["accepting"].clone(), s["threads"].clone()) })
                .collect();
            prop_assert!(views.windows(2).all(|w| w[0] == w[1]));
        }
    }
}
