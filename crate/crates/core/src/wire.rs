//! Host/server protocol: one canonical JSON envelope per line.
//!
//! A host sends requests (`hello`, `join`, `event_up`, `completion`,
//! `state_sync`, `error`) and gets exactly one reply per request, echoing the
//! request's `seq` and `type`. Commands travel as `command_down` envelopes
//! the server writes just before a reply, so a host sees every command queued
//! for it by the time its request returns. `hello` doubles as a poll.
//!
//! The same [`Session`] logic backs the in-process link and the TCP front, so
//! both modes exchange identical lines.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical;
use crate::model::{CommandCompletion, InterActivityEvent, ToolInstanceRef};
use crate::server::{ActivityServer, ServerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageType {
    Hello,
    Join,
    EventUp,
    CommandDown,
    Completion,
    StateSync,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(rename = "type")]
    pub kind: MessageType,
    pub seq: u64,
    pub body: Value,
}

impl Envelope {
    pub fn new<T: Serialize>(kind: MessageType, seq: u64, body: &T) -> Self {
        Self {
            kind,
            seq,
            body: serde_json::to_value(body).expect("wire bodies serialize"),
        }
    }

    pub fn to_line(&self) -> String {
        canonical::to_canonical_string(self).expect("envelopes serialize")
    }

    pub fn from_line(line: &str) -> Result<Self, WireError> {
        serde_json::from_str(line.trim_end()).map_err(|e| WireError::Malformed(e.to_string()))
    }

    pub fn body_as<T: DeserializeOwned>(&self) -> Result<T, WireError> {
        serde_json::from_value(self.body.clone()).map_err(|e| WireError::Malformed(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub host_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinRequest {
    pub instance_id: String,
    pub user_id: String,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSync {
    pub instance_id: String,
    pub instances: Vec<ToolInstanceRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub instance_id: String,
    pub code: String,
    pub detail: String,
}

/// Body of every reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reply {
    Ok(Value),
    Err(Refusal),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refusal {
    pub code: String,
    pub detail: String,
}

impl From<&ServerError> for Refusal {
    fn from(e: &ServerError) -> Self {
        Refusal {
            code: e.code().into(),
            detail: e.to_string(),
        }
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("server unreachable: {0}")]
    Unreachable(String),
    #[error("reply out of order: expected seq {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
}

/// Server side of one host connection.
pub struct Session {
    server: Arc<ActivityServer>,
    host_id: Option<String>,
    push_seq: u64,
}

impl Session {
    pub fn new(server: Arc<ActivityServer>) -> Self {
        Self {
            server,
            host_id: None,
            push_seq: 0,
        }
    }

    /// Handles one request line; returns the lines to write back, pushes
    /// first and the reply last.
    pub fn handle_line(&mut self, line: &str) -> Vec<String> {
        let env = match Envelope::from_line(line) {
            Ok(e) => e,
            Err(e) => {
                let refusal = Refusal {
                    code: "malformed".into(),
                    detail: e.to_string(),
                };
                return vec![Envelope::new(MessageType::Error, 0, &Reply::Err(refusal)).to_line()];
            }
        };
        let reply = match self.dispatch(&env) {
            Ok(v) => Reply::Ok(v),
            Err(r) => Reply::Err(r),
        };
        let mut lines = Vec::new();
        if let Some(host) = &self.host_id {
            for cmd in self.server.take_commands(host) {
                self.push_seq += 1;
                lines.push(Envelope::new(MessageType::CommandDown, self.push_seq, &cmd).to_line());
            }
        }
        lines.push(Envelope::new(env.kind, env.seq, &reply).to_line());
        lines
    }

    fn dispatch(&mut self, env: &Envelope) -> Result<Value, Refusal> {
        fn body<T: DeserializeOwned>(env: &Envelope) -> Result<T, Refusal> {
            env.body_as().map_err(|e| Refusal {
                code: "malformed".into(),
                detail: e.to_string(),
            })
        }
        let s = &self.server;
        let value = |r: Result<Value, ServerError>| r.map_err(|e| Refusal::from(&e));
        match env.kind {
            MessageType::Hello => {
                let h: Hello = body(env)?;
                self.host_id = Some(h.host_id.clone());
                Ok(serde_json::json!({"server": "coolda", "host_id": h.host_id}))
            }
            kind => {
                let Some(host) = self.host_id.clone() else {
                    return Err(Refusal {
                        code: "no_hello".into(),
                        detail: "send hello first".into(),
                    });
                };
                match kind {
                    MessageType::Join => {
                        let j: JoinRequest = body(env)?;
                        if j.user_id != host {
                            return Err(Refusal {
                                code: "wrong_user".into(),
                                detail: format!("host `{host}` cannot join as `{}`", j.user_id),
                            });
                        }
                        value(s.join(&j.instance_id, &j.user_id, &j.role).map(to_value))
                    }
                    MessageType::EventUp => {
                        let ev: InterActivityEvent = body(env)?;
                        match s.receive_event(ev) {
                            Ok(out) => Ok(to_value(out)),
                            // The event was sequenced and traced; only its cascade was cut.
                            Err(ServerError::CascadeDepthExceeded(out)) => Ok(to_value(*out)),
                            Err(e) => Err(Refusal::from(&e)),
                        }
                    }
                    MessageType::Completion => {
                        let c: CommandCompletion = body(env)?;
                        value(s.complete_command(c).map(|fresh| serde_json::json!({"recorded": fresh})))
                    }
                    MessageType::StateSync => {
                        let sync: StateSync = body(env)?;
                        value(s.sync_host(&sync.instance_id, &host, sync.instances).map(to_value))
                    }
                    MessageType::Error => {
                        let r: ErrorReport = body(env)?;
                        value(s.report_host_error(&r.instance_id, &r.code, &r.detail).map(|_| Value::Null))
                    }
                    MessageType::CommandDown | MessageType::Hello => Err(Refusal {
                        code: "unexpected".into(),
                        detail: "hosts do not send command_down".into(),
                    }),
                }
            }
        }
    }
}

fn to_value<T: Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("server values serialize")
}

/// A host's connection to the server.
pub trait ServerLink: Send {
    /// Sends one request and waits for its reply. Pushes that arrive first
    /// are kept for [`ServerLink::take_pushes`].
    fn request(&mut self, env: Envelope) -> Result<Envelope, WireError>;

    fn take_pushes(&mut self) -> Vec<Envelope>;
}

fn split_reply(lines: impl IntoIterator<Item = String>, expected: u64, pushes: &mut Vec<Envelope>) -> Result<Option<Envelope>, WireError> {
    for line in lines {
        let env = Envelope::from_line(&line)?;
        if env.kind == MessageType::CommandDown {
            pushes.push(env);
            continue;
        }
        if env.seq != expected {
            return Err(WireError::OutOfOrder {
                expected,
                got: env.seq,
            });
        }
        return Ok(Some(env));
    }
    Ok(None)
}

/// Talks to a server in the same process, still through encoded lines.
pub struct InProcessLink {
    session: Session,
    pushes: Vec<Envelope>,
}

impl InProcessLink {
    pub fn new(server: Arc<ActivityServer>) -> Self {
        Self {
            session: Session::new(server),
            pushes: Vec::new(),
        }
    }
}

impl ServerLink for InProcessLink {
    fn request(&mut self, env: Envelope) -> Result<Envelope, WireError> {
        let lines = self.session.handle_line(&env.to_line());
        split_reply(lines, env.seq, &mut self.pushes)?
            .ok_or_else(|| WireError::Malformed("no reply".into()))
    }

    fn take_pushes(&mut self) -> Vec<Envelope> {
        std::mem::take(&mut self.pushes)
    }
}

pub struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    pushes: Vec<Envelope>,
}

impl TcpLink {
    pub fn connect(addr: SocketAddr) -> Result<Self, WireError> {
        let stream = TcpStream::connect(addr).map_err(|e| WireError::Unreachable(e.to_string()))?;
        stream.set_nodelay(true).ok();
        let writer = stream.try_clone().map_err(|e| WireError::Unreachable(e.to_string()))?;
        Ok(Self {
            reader: BufReader::new(stream),
            writer,
            pushes: Vec::new(),
        })
    }
}

impl ServerLink for TcpLink {
    fn request(&mut self, env: Envelope) -> Result<Envelope, WireError> {
        let unreachable = |e: std::io::Error| WireError::Unreachable(e.to_string());
        let mut line = env.to_line();
        line.push('\n');
        self.writer.write_all(line.as_bytes()).map_err(unreachable)?;
        loop {
            let mut buf = String::new();
            if self.reader.read_line(&mut buf).map_err(unreachable)? == 0 {
                return Err(WireError::Unreachable("connection closed".into()));
            }
            if let Some(reply) = split_reply([buf], env.seq, &mut self.pushes)? {
                return Ok(reply);
            }
        }
    }

    fn take_pushes(&mut self) -> Vec<Envelope> {
        std::mem::take(&mut self.pushes)
    }
}

/// Accepts host connections and serves each on its own thread.
pub struct TcpFront {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl TcpFront {
    pub fn bind(server: Arc<ActivityServer>, addr: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let server = server.clone();
                std::thread::spawn(move || serve_connection(server, stream));
            }
        });
        Ok(Self {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpFront {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop so it sees the flag.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve_connection(server: Arc<ActivityServer>, stream: TcpStream) {
    stream.set_nodelay(true).ok();
    let Ok(mut writer) = stream.try_clone() else { return };
    let mut session = Session::new(server);
    for line in BufReader::new(stream).lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let mut out = session.handle_line(&line).join("\n");
        out.push('\n');
        if writer.write_all(out.as_bytes()).is_err() {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server::ServerConfig;
    use crate::tools::example_registry;

    #[test]
    fn envelope_lines_are_canonical() {
        let env = Envelope::new(MessageType::EventUp, 3, &serde_json::json!({"b": 1, "a": [true]}));
        let line = env.to_line();
        assert_eq!(line, r#"{"body":{"a":[true],"b":1},"seq":3,"type":"event_up"}"#);
        assert_eq!(Envelope::from_line(&line).unwrap(), env);
    }

    #[test]
    fn requests_before_hello_are_refused() {
        let server = Arc::new(ActivityServer::new(Arc::new(example_registry()), ServerConfig::default()));
        let mut s = Session::new(server);
        let join = JoinRequest {
            instance_id: "act-1".into(),
            user_id: "u".into(),
            role: "r".into(),
        };
        let lines = s.handle_line(&Envelope::new(MessageType::Join, 1, &join).to_line());
        let reply: Reply = Envelope::from_line(&lines[0]).unwrap().body_as().unwrap();
        assert!(matches!(reply, Reply::Err(r) if r.code == "no_hello"));
        let lines = s.handle_line("{not json");
        assert_eq!(Envelope::from_line(&lines[0]).unwrap().kind, MessageType::Error);
    }
}
