//! Motion voting. The vote server owns the poll book; after every change it
//! publishes a complete snapshot, and each client keeps only the newest one.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use serde_json::{json, Map, Value};

use super::{check_op, is_integration, payload};
use crate::contract::{
    arg_str, EventSink, InstantiateContext, ToolError, ToolFactory, ToolInstance, ToolManifest,
};
use crate::model::{EventSignature, OperationSignature, Param, SemanticType};

pub struct Vote;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Poll {
    pub motion: String,
    pub open: bool,
    pub tally: BTreeMap<String, String>,
    pub outcome: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VoteState {
    pub polls: BTreeMap<String, Poll>,
}

/// `"yes"` or `"no"` by simple majority of cast ballots; equal counts give `"tie"`.
pub fn majority(tally: &BTreeMap<String, String>) -> &'static str {
    let yes = tally.values().filter(|c| *c == "yes").count();
    let no = tally.values().filter(|c| *c == "no").count();
    match yes.cmp(&no) {
        std::cmp::Ordering::Greater => "yes",
        std::cmp::Ordering::Less => "no",
        std::cmp::Ordering::Equal => "tie",
    }
}

type Mailbox = Arc<Mutex<Option<(u64, VoteState)>>>;

#[derive(Default)]
struct VoteServer {
    book: VoteState,
    next_id: u64,
    version: u64,
    replicas: BTreeMap<String, Mailbox>,
}

impl VoteServer {
    fn publish(&mut self) {
        self.version += 1;
        for mailbox in self.replicas.values() {
            *mailbox.lock().unwrap() = Some((self.version, self.book.clone()));
        }
    }

    fn open_poll(&mut self, motion: &str) -> String {
        self.next_id += 1;
        let id = format!("m{}", self.next_id);
        self.book.polls.insert(
            id.clone(),
            Poll {
                motion: motion.into(),
                open: true,
                tally: BTreeMap::new(),
                outcome: None,
            },
        );
        self.publish();
        id
    }

    fn cast(&mut self, poll: &str, user: &str, choice: &str) -> Result<(), ToolError> {
        let p = self
            .book
            .polls
            .get_mut(poll)
            .ok_or_else(|| ToolError::rejected("unknown_poll", poll))?;
        if !p.open {
            return Err(ToolError::rejected("poll_closed", poll));
        }
        p.tally.insert(user.into(), choice.into());
        self.publish();
        Ok(())
    }

    fn close(&mut self, poll: &str) -> Result<String, ToolError> {
        let p = self
            .book
            .polls
            .get_mut(poll)
            .ok_or_else(|| ToolError::rejected("unknown_poll", poll))?;
        if !p.open {
            return Err(ToolError::rejected("poll_closed", poll));
        }
        let outcome = majority(&p.tally).to_string();
        p.open = false;
        p.outcome = Some(outcome.clone());
        self.publish();
        Ok(outcome)
    }
}

impl ToolFactory for Vote {
    fn manifest(&self) -> ToolManifest {
        use SemanticType::*;
        ToolManifest {
            tool_id: "vote".into(),
            version: "0.9.4".into(),
            activity_kind: "decision-making".into(),
            roles: vec!["chair".into(), "voter".into()],
            operations: vec![
                OperationSignature::new("ia_open_poll", vec![Param::new("motion", String)], Some(String)),
                OperationSignature::new("ia_close_poll", vec![Param::new("poll", String)], None),
                OperationSignature::new("propose_motion", vec![Param::new("motion", String)], Some(String)),
                OperationSignature::new(
                    "cast",
                    vec![Param::new("poll", String), Param::new("choice", String)],
                    None,
                ),
                OperationSignature::new("decide", vec![Param::new("poll", String)], Some(String)),
                OperationSignature::new("results", vec![], Some(Json)),
            ],
            events: vec![
                EventSignature::new(
                    "motion_proposed",
                    [("motion_id", String), ("motion", String), ("actor", UserRef)],
                ),
                EventSignature::new("motion_decided", [("motion_id", String), ("outcome", String)]),
            ],
        }
    }

    fn instantiate(&self, ctx: InstantiateContext<'_>) -> Result<Box<dyn ToolInstance>, ToolError> {
        let server = ctx
            .network
            .server(&format!("vote/{}", ctx.session), || Mutex::new(VoteServer::default()));
        let mailbox = Mailbox::default();
        let replica = {
            let mut s = server.lock().unwrap();
            s.replicas.insert(ctx.user_id.into(), mailbox.clone());
            (s.version, s.book.clone())
        };
        Ok(Box::new(VoteClient {
            manifest: self.manifest(),
            user: ctx.user_id.into(),
            role: ctx.assigned_role.unwrap_or("voter").into(),
            server,
            mailbox,
            replica,
            sink: None,
            live: true,
        }))
    }
}

struct VoteClient {
    manifest: ToolManifest,
    user: String,
    role: String,
    server: Arc<Mutex<VoteServer>>,
    mailbox: Mailbox,
    replica: (u64, VoteState),
    sink: Option<EventSink>,
    live: bool,
}

impl VoteClient {
    fn sync(&mut self) {
        if let Some(snapshot) = self.mailbox.lock().unwrap().take() {
            if snapshot.0 > self.replica.0 {
                self.replica = snapshot;
            }
        }
    }

    fn emit(&self, event: &str, data: Map<String, Value>) {
        if let Some(sink) = &self.sink {
            sink.emit(event, data, Some(&self.user));
        }
    }

    fn decided(&self, poll: &str, outcome: &str) {
        self.emit(
            "motion_decided",
            payload(&[("motion_id", json!(poll)), ("outcome", json!(outcome))]),
        );
    }

    fn run(&mut self, op: &str, args: &Map<String, Value>) -> Result<Value, ToolError> {
        if !self.live {
            return Err(ToolError::rejected("shut_down", "vote client closed"));
        }
        check_op(&self.manifest, op, args)?;
        let result = match op {
            "ia_open_poll" => {
                let id = self.server.lock().unwrap().open_poll(arg_str(args, "motion")?);
                json!(id)
            }
            "propose_motion" => {
                let motion = arg_str(args, "motion")?;
                let id = self.server.lock().unwrap().open_poll(motion);
                self.emit(
                    "motion_proposed",
                    payload(&[
                        ("motion_id", json!(id)),
                        ("motion", json!(motion)),
                        ("actor", json!(self.user)),
                    ]),
                );
                json!(id)
            }
            "cast" => {
                let choice = arg_str(args, "choice")?;
                if choice != "yes" && choice != "no" {
                    return Err(ToolError::rejected("bad_choice", choice));
                }
                self.server
                    .lock()
                    .unwrap()
                    .cast(arg_str(args, "poll")?, &self.user, choice)?;
                Value::Null
            }
            "ia_close_poll" | "decide" => {
                if op == "decide" && self.role != "chair" {
                    return Err(ToolError::rejected("not_chair", "only the chair decides"));
                }
                let poll = arg_str(args, "poll")?;
                let outcome = self.server.lock().unwrap().close(poll)?;
                self.decided(poll, &outcome);
                if op == "decide" {
                    json!(outcome)
                } else {
                    Value::Null
                }
            }
            "results" => {
                self.sync();
                serde_json::to_value(&self.replica.1).unwrap()
            }
            other => return Err(ToolError::UnknownOperation(other.into())),
        };
        self.sync();
        Ok(result)
    }
}

impl ToolInstance for VoteClient {
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
            "version": self.replica.0,
            "polls": self.replica.1.polls,
        })
    }

    fn shutdown(&mut self) {
        if self.live {
            self.server.lock().unwrap().replicas.remove(&self.user);
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

    fn client(net: &ToolNetwork, user: &str, role: &str) -> (Box<dyn ToolInstance>, EventSink) {
        let params = BTreeMap::new();
        let mut c = Vote
            .instantiate(InstantiateContext {
                user_id: user,
                session: "s",
                instance_params: &params,
                assigned_role: Some(role),
                network: net,
            })
            .unwrap();
        let sink = EventSink::new();
        c.subscribe(sink.clone());
        (c, sink)
    }

    #[test]
    fn proposing_emits_motion_proposed() {
        let net = ToolNetwork::new();
        let (mut chair, sink) = client(&net, "alice", "chair");
        let id = chair
            .user_action("propose_motion", &payload(&[("motion", json!("close debate"))]))
            .unwrap();
        assert_eq!(id, json!("m1"));
        let ev = sink.drain();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].event_name, "motion_proposed");
        assert_eq!(ev[0].payload["motion"], json!("close debate"));
        assert_eq!(ev[0].payload["actor"], json!("alice"));
    }

    #[test]
    fn close_errors() {
        let net = ToolNetwork::new();
        let (mut c, _) = client(&net, "alice", "chair");
        let err = c.invoke("ia_close_poll", &payload(&[("poll", json!("m9"))])).unwrap_err();
        assert_eq!(err.code(), "unknown_poll");
        let id = c.invoke("ia_open_poll", &payload(&[("motion", json!("x"))])).unwrap();
        c.invoke("ia_close_poll", &payload(&[("poll", id.clone())])).unwrap();
        let err = c.invoke("ia_close_poll", &payload(&[("poll", id.clone())])).unwrap_err();
        assert_eq!(err.code(), "poll_closed");
        let err = c
            .user_action("cast", &payload(&[("poll", id), ("choice", json!("yes"))]))
            .unwrap_err();
        assert_eq!(err.code(), "poll_closed");
    }

    #[test]
    fn snapshots_reach_every_client() {
        let net = ToolNetwork::new();
        let (mut a, _) = client(&net, "alice", "chair");
        let (mut b, _) = client(&net, "bob", "voter");
        let id = a.user_action("propose_motion", &payload(&[("motion", json!("m"))])).unwrap();
        b.user_action("cast", &payload(&[("poll", id.clone()), ("choice", json!("no"))]))
            .unwrap();
        assert_eq!(a.state()["polls"], b.state()["polls"]);
        assert_eq!(a.state()["polls"]["m1"]["tally"]["bob"], json!("no"));
        let err = b.user_action("decide", &payload(&[("poll", id)])).unwrap_err();
        assert_eq!(err.code(), "not_chair");
    }

    /// Independent oracle: count each choice by hand.
    fn expected_outcome(ballots: &[Option<bool>]) -> &'static str {
        let (mut yes, mut no) = (0, 0);
        for b in ballots.iter().flatten() {
            if *b {
                yes += 1
            } else {
                no += 1
            }
        }
        if yes > no {
            "yes"
        } else if no > yes {
            "no"
        } else {
            "tie"
        }
    }

    #[test]
    fn decision_matches_brute_force_for_up_to_three_voters() {
        let options = [None, Some(true), Some(false)];
        for voters in 0..=3usize {
            let combos = 3usize.pow(voters as u32);
            for code in 0..combos {
                let ballots: Vec<Option<bool>> =
                    (0..voters).map(|i| options[(code / 3usize.pow(i as u32)) % 3]).collect();

                let net = ToolNetwork::new();
                let (mut chair, sink) = client(&net, "chair", "chair");
                let poll = chair
                    .user_action("propose_motion", &payload(&[("motion", json!("m"))]))
                    .unwrap();
                for (i, b) in ballots.iter().enumerate() {
                    if let Some(yes) = b {
                        let (mut v, _) = client(&net, &format!("v{i}"), "voter");
                        let choice = if *yes { "yes" } else { "no" };
                        v.user_action("cast", &payload(&[("poll", poll.clone()), ("choice", json!(choice))]))
                            .unwrap();
                    }
                }
                let outcome = chair.user_action("decide", &payload(&[("poll", poll)])).unwrap();
                assert_eq!(outcome, json!(expected_outcome(&ballots)), "ballots {ballots:?}");
                let decided = sink.drain().pop().unwrap();
                assert_eq!(decided.event_name, "motion_decided");
                assert_eq!(decided.payload["outcome"], outcome);
            }
        }
    }
}
