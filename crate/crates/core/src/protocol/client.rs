//! Tool side of the control channel, used by in-process simulated tools.

use std::time::Duration;

use serde_json::{json, Value};

use super::token::Token;
use super::transport::{Connection, TransportError};
use super::{b64_encode, Envelope, InputDescriptor, MsgType};
use crate::registry::{Assignment, VersionKey};

#[derive(Debug, Clone, PartialEq)]
pub enum ToolRequest {
    Start { hyperparameters: Assignment, inputs: Vec<InputDescriptor> },
    Configure(Assignment),
    Terminate(Option<String>),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("engine frame rejected: {0}")]
    Protocol(String),
}

pub struct ToolClient<C: Connection> {
    conn: C,
    run_id: String,
    seq: u64,
    last_inbound: Option<u64>,
}

impl<C: Connection> ToolClient<C> {
    pub fn hello_envelope(run_id: &str, seq: u64, token: &Token, tool: &VersionKey) -> Envelope {
        Envelope::new(
            MsgType::Hello,
            run_id,
            seq,
            json!({ "token": token, "tool_id": tool.tool_id, "version": tool.version }),
        )
    }

    /// Sends HELLO and waits for HELLO_ACK.
    pub fn connect(
        mut conn: C,
        run_id: &str,
        token: &Token,
        tool: &VersionKey,
        timeout: Option<Duration>,
    ) -> Result<Self, ClientError> {
        conn.send(&Self::hello_envelope(run_id, 0, token, tool))?;
        let mut client = ToolClient { conn, run_id: run_id.to_string(), seq: 1, last_inbound: None };
        let ack = client.recv(timeout)?;
        if ack.msg_type != MsgType::HelloAck {
            return Err(ClientError::Protocol(format!("expected HELLO_ACK, got {}", ack.msg_type)));
        }
        Ok(client)
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Envelope, ClientError> {
        let env = self.conn.recv(timeout)?;
        if let Some(last) = self.last_inbound {
            if env.seq <= last {
                return Err(ClientError::Protocol(format!("sequence regression: {} after {last}", env.seq)));
            }
        }
        self.last_inbound = Some(env.seq);
        Ok(env)
    }

    pub fn next_request(&mut self, timeout: Option<Duration>) -> Result<ToolRequest, ClientError> {
        let env = self.recv(timeout)?;
        let p = env.payload;
        let assignment = |v: Option<&Value>| -> Result<Assignment, ClientError> {
            serde_json::from_value(v.cloned().unwrap_or(json!({}))).map_err(|e| ClientError::Protocol(e.to_string()))
        };
        match env.msg_type {
            MsgType::StartRun => Ok(ToolRequest::Start {
                hyperparameters: assignment(p.get("hyperparameters"))?,
                inputs: serde_json::from_value(p.get("inputs").cloned().unwrap_or(json!([])))
                    .map_err(|e| ClientError::Protocol(e.to_string()))?,
            }),
            MsgType::Configure => Ok(ToolRequest::Configure(assignment(p.get("hyperparameters"))?)),
            MsgType::Terminate => {
                Ok(ToolRequest::Terminate(p.get("reason").and_then(Value::as_str).map(str::to_string)))
            }
            other => Err(ClientError::Protocol(format!("unexpected {other} from engine"))),
        }
    }

    fn emit(&mut self, t: MsgType, payload: Value) -> Result<(), ClientError> {
        let env = Envelope::new(t, &self.run_id, self.seq, payload);
        self.seq += 1;
        Ok(self.conn.send(&env)?)
    }

    pub fn status(&mut self, state: &str) -> Result<(), ClientError> {
        self.emit(MsgType::StatusUpdate, json!({ "state": state }))
    }

    pub fn log(&mut self, level: &str, message: &str) -> Result<(), ClientError> {
        self.emit(MsgType::Log, json!({ "level": level, "message": message }))
    }

    pub fn metric(&mut self, name: &str, value: f64) -> Result<(), ClientError> {
        self.emit(MsgType::Metric, json!({ "name": name, "value": value }))
    }

    pub fn output(&mut self, name: &str, bytes: &[u8]) -> Result<(), ClientError> {
        self.emit(MsgType::OutputArtifact, json!({ "name": name, "data": b64_encode(bytes) }))
    }

    pub fn finished(&mut self) -> Result<(), ClientError> {
        self.emit(MsgType::RunFinished, json!({}))
    }

    pub fn error(&mut self, message: &str, stack_trace: &str, context: Value) -> Result<(), ClientError> {
        self.emit(MsgType::RunError, json!({ "message": message, "stack_trace": stack_trace, "context": context }))
    }

    pub fn into_inner(self) -> C {
        self.conn
    }
}
