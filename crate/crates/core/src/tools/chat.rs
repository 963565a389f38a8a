//! Floor-controlled chat. Every change is fanned out to all members as a
//! broadcast; clients fold broadcasts into their local view.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use serde_json::{json, Map, Value};

use super::{check_op, is_integration, payload};
use crate::contract::{
    arg_str, EventSink, InstantiateContext, ToolError, ToolFactory, ToolInstance, ToolManifest,
};
use crate::model::{EventSignature, OperationSignature, Param, SemanticType};

pub struct Chat;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChatLine {
    pub from: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ChatState {
    pub log: Vec<ChatLine>,
    pub floor_holder: Option<String>,
    pub members: BTreeSet<String>,
}

#[derive(Debug, Clone)]
enum Broadcast {
    Line(ChatLine),
    Floor(Option<String>),
    Members(BTreeSet<String>),
}

type Outlet = Arc<Mutex<VecDeque<Broadcast>>>;

#[derive(Default)]
struct ChatServer {
    state: ChatState,
    outlets: BTreeMap<String, Outlet>,
}

impl ChatServer {
    fn fan_out(&self, b: Broadcast) {
        for o in self.outlets.values() {
            o.lock().unwrap().push_back(b.clone());
        }
    }

    fn join(&mut self, user: &str, outlet: Outlet) -> ChatState {
        self.outlets.insert(user.into(), outlet);
        self.state.members.insert(user.into());
        self.fan_out(Broadcast::Members(self.state.members.clone()));
        self.state.clone()
    }

    fn leave(&mut self, user: &str) {
        self.outlets.remove(user);
        self.state.members.remove(user);
        if self.state.floor_holder.as_deref() == Some(user) {
            self.state.floor_holder = None;
            self.fan_out(Broadcast::Floor(None));
        }
        self.fan_out(Broadcast::Members(self.state.members.clone()));
    }

    /// Returns whether the holder changed.
    fn grant(&mut self, user: Option<&str>) -> Result<bool, ToolError> {
        if let Some(u) = user {
            if !self.state.members.contains(u) {
                return Err(ToolError::rejected("unknown_user", u));
            }
        }
        let next = user.map(str::to_string);
        if self.state.floor_holder == next {
            return Ok(false);
        }
        self.state.floor_holder = next.clone();
        self.fan_out(Broadcast::Floor(next));
        Ok(true)
    }

    fn say(&mut self, from: &str, text: &str) -> Result<(), ToolError> {
        match &self.state.floor_holder {
            Some(holder) if holder != from => {
                Err(ToolError::rejected("floor_held", format!("{holder} holds the floor")))
            }
            _ => {
                let line = ChatLine {
                    from: from.into(),
                    text: text.into(),
                };
                self.state.log.push(line.clone());
                self.fan_out(Broadcast::Line(line));
                Ok(())
            }
        }
    }
}

impl ToolFactory for Chat {
    fn manifest(&self) -> ToolManifest {
        use SemanticType::*;
        ToolManifest {
            tool_id: "chat".into(),
            version: "2.0.1".into(),
            activity_kind: "synchronous-discussion".into(),
            roles: vec!["orator".into(), "listener".into()],
            operations: vec![
                OperationSignature::new("ia_grant_floor", vec![Param::new("user", UserRef)], None),
                OperationSignature::new("say", vec![Param::new("text", String)], None),
                OperationSignature::new("release_floor", vec![], None),
                OperationSignature::new("history", vec![], Some(Json)),
            ],
            events: vec![EventSignature::new("floor_changed", [("user", UserRef)])],
        }
    }

    fn instantiate(&self, ctx: InstantiateContext<'_>) -> Result<Box<dyn ToolInstance>, ToolError> {
        let server = ctx
            .network
            .server(&format!("chat/{}", ctx.session), || Mutex::new(ChatServer::default()));
        let outlet = Outlet::default();
        let role = ctx.assigned_role.unwrap_or("listener").to_string();
        let replica = {
            let mut s = server.lock().unwrap();
            let snapshot = s.join(ctx.user_id, outlet.clone());
            if role == "orator" {
                s.grant(Some(ctx.user_id))?;
            }
            snapshot
        };
        let mut client = ChatClient {
            manifest: self.manifest(),
            user: ctx.user_id.into(),
            role,
            server,
            outlet,
            replica,
            sink: None,
            live: true,
        };
        client.sync();
        Ok(Box::new(client))
    }
}

struct ChatClient {
    manifest: ToolManifest,
    user: String,
    role: String,
    server: Arc<Mutex<ChatServer>>,
    outlet: Outlet,
    replica: ChatState,
    sink: Option<EventSink>,
    live: bool,
}

impl ChatClient {
    fn sync(&mut self) {
        let pending: Vec<Broadcast> = self.outlet.lock().unwrap().drain(..).collect();
        for b in pending {
            match b {
                Broadcast::Line(l) => self.replica.log.push(l),
                Broadcast::Floor(f) => self.replica.floor_holder = f,
                Broadcast::Members(m) => self.replica.members = m,
            }
        }
    }

    fn run(&mut self, op: &str, args: &Map<String, Value>) -> Result<Value, ToolError> {
        if !self.live {
            return Err(ToolError::rejected("shut_down", "chat client closed"));
        }
        check_op(&self.manifest, op, args)?;
        let result = match op {
            "ia_grant_floor" => {
                let user = arg_str(args, "user")?;
                if self.server.lock().unwrap().grant(Some(user))? {
                    if let Some(sink) = &self.sink {
                        sink.emit("floor_changed", payload(&[("user", json!(user))]), Some(&self.user));
                    }
                }
                Value::Null
            }
            "say" => {
                self.server.lock().unwrap().say(&self.user, arg_str(args, "text")?)?;
                Value::Null
            }
            "release_floor" => {
                let mut s = self.server.lock().unwrap();
                if s.state.floor_holder.as_deref() != Some(&self.user) {
                    return Err(ToolError::rejected("not_holder", "floor not held"));
                }
                s.grant(None)?;
                Value::Null
            }
            "history" => {
                self.sync();
                serde_json::to_value(&self.replica.log).unwrap()
            }
            other => return Err(ToolError::UnknownOperation(other.into())),
        };
        self.sync();
        Ok(result)
    }
}

impl ToolInstance for ChatClient {
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
            "floor_holder": self.replica.floor_holder,
            "members": self.replica.members,
            "log": self.replica.log,
        })
    }

    fn shutdown(&mut self) {
        if self.live {
            self.server.lock().unwrap().leave(&self.user);
            if let Some(sink) = &self.sink {
                sink.close();
            }
            self.live = false;
        }
    }
}
