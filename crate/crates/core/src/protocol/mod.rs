//! Engine/tool control channel.
//!
//! Frames are single-line JSON documents with the fields `type`, `run_id`,
//! `seq` and `payload`. Binary data travels base64-encoded.

pub mod client;
pub mod session;
pub mod token;
pub mod transport;

use std::fmt;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest::Digest;

pub use client::{ToolClient, ToolRequest};
pub use session::{build_start_message, perform_handshake, ArtifactSink, EngineSession, SessionError};
pub use token::{AuthError, Token, TokenIssuer};
pub use transport::{memory_pair, Connection, EngineListener, MemoryConnection, TcpConnection, TransportError};

/// Largest payload (decoded bytes) sent inline over the channel.
pub const INLINE_THRESHOLD: usize = 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MsgType {
    Hello,
    HelloAck,
    Configure,
    StartRun,
    StatusUpdate,
    Log,
    Metric,
    OutputArtifact,
    RunFinished,
    RunError,
    Terminate,
}

impl MsgType {
    pub const ALL: [MsgType; 11] = [
        MsgType::Hello,
        MsgType::HelloAck,
        MsgType::Configure,
        MsgType::StartRun,
        MsgType::StatusUpdate,
        MsgType::Log,
        MsgType::Metric,
        MsgType::OutputArtifact,
        MsgType::RunFinished,
        MsgType::RunError,
        MsgType::Terminate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MsgType::Hello => "HELLO",
            MsgType::HelloAck => "HELLO_ACK",
            MsgType::Configure => "CONFIGURE",
            MsgType::StartRun => "START_RUN",
            MsgType::StatusUpdate => "STATUS_UPDATE",
            MsgType::Log => "LOG",
            MsgType::Metric => "METRIC",
            MsgType::OutputArtifact => "OUTPUT_ARTIFACT",
            MsgType::RunFinished => "RUN_FINISHED",
            MsgType::RunError => "RUN_ERROR",
            MsgType::Terminate => "TERMINATE",
        }
    }

    pub fn parse(s: &str) -> Option<MsgType> {
        MsgType::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// Messages the tool sends to the engine.
    pub fn is_tool_originated(self) -> bool {
        matches!(
            self,
            MsgType::Hello
                | MsgType::StatusUpdate
                | MsgType::Log
                | MsgType::Metric
                | MsgType::OutputArtifact
                | MsgType::RunFinished
                | MsgType::RunError
        )
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    #[serde(rename = "type")]
    pub msg_type: MsgType,
    pub run_id: String,
    pub seq: u64,
    pub payload: Value,
}

impl Envelope {
    pub fn new(msg_type: MsgType, run_id: &str, seq: u64, payload: Value) -> Self {
        Envelope { msg_type, run_id: run_id.to_string(), seq, payload }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed frame at line {line} column {column}: {message}")]
    Malformed { line: usize, column: usize, message: String },
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("sequence number must be a non-negative integer, got {0}")]
    InvalidSeq(String),
    #[error("invalid envelope: {0}")]
    Invalid(String),
}

/// Encodes one envelope as a single line of text (without the newline).
pub fn encode_envelope(env: &Envelope) -> Result<String, ProtocolError> {
    if env.run_id.is_empty() {
        return Err(ProtocolError::Invalid("run_id is empty".into()));
    }
    serde_json::to_string(env).map_err(|e| ProtocolError::Invalid(e.to_string()))
}

pub fn decode_envelope(line: &str) -> Result<Envelope, ProtocolError> {
    let line = line.strip_suffix('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)).unwrap_or(line);
    let value: Value = serde_json::from_str(line).map_err(|e| ProtocolError::Malformed {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| ProtocolError::Invalid("frame is not an object".into()))?;
    match obj.get("type") {
        Some(Value::String(t)) if MsgType::parse(t).is_some() => {}
        Some(Value::String(t)) => return Err(ProtocolError::UnknownType(t.clone())),
        Some(other) => return Err(ProtocolError::UnknownType(other.to_string())),
        None => return Err(ProtocolError::Invalid("missing field `type`".into())),
    }
    match obj.get("seq") {
        Some(v) if v.is_u64() => {}
        Some(v) => return Err(ProtocolError::InvalidSeq(v.to_string())),
        None => return Err(ProtocolError::Invalid("missing field `seq`".into())),
    }
    let env: Envelope = serde_json::from_value(value).map_err(|e| ProtocolError::Invalid(e.to_string()))?;
    if env.run_id.is_empty() {
        return Err(ProtocolError::Invalid("run_id is empty".into()));
    }
    Ok(env)
}

/// How one input port receives its data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InputSource {
    InContainerPath { path: String },
    UploadedFile { artifact: Digest },
    InlinePayload { data: String },
    DownloadRef { uri: String, checksum: String },
}

impl InputSource {
    pub fn inline(bytes: &[u8]) -> Self {
        InputSource::InlinePayload { data: base64::engine::general_purpose::STANDARD.encode(bytes) }
    }

    pub fn mechanism(&self) -> &'static str {
        match self {
            InputSource::InContainerPath { .. } => "IN_CONTAINER_PATH",
            InputSource::UploadedFile { .. } => "UPLOADED_FILE",
            InputSource::InlinePayload { .. } => "INLINE_PAYLOAD",
            InputSource::DownloadRef { .. } => "DOWNLOAD_REF",
        }
    }

    /// Decoded bytes of an inline payload.
    pub fn inline_bytes(&self) -> Option<Result<Vec<u8>, String>> {
        match self {
            InputSource::InlinePayload { data } => {
                Some(base64::engine::general_purpose::STANDARD.decode(data).map_err(|e| e.to_string()))
            }
            _ => None,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        match self {
            InputSource::InContainerPath { path } if path.is_empty() => Err("empty container path".into()),
            InputSource::InlinePayload { .. } => {
                let bytes = self.inline_bytes().expect("inline")?;
                if bytes.len() > INLINE_THRESHOLD {
                    return Err(format!("inline payload of {} bytes exceeds {INLINE_THRESHOLD}", bytes.len()));
                }
                Ok(())
            }
            InputSource::DownloadRef { checksum, .. } if checksum.trim().is_empty() => {
                Err("download reference without checksum".into())
            }
            InputSource::DownloadRef { uri, .. } if uri.trim().is_empty() => {
                Err("download reference without uri".into())
            }
            _ => Ok(()),
        }
    }
}

/// Mechanism for shipping `size` bytes held by the engine.
pub fn mechanism_for_size(size: usize) -> &'static str {
    if size <= INLINE_THRESHOLD {
        "INLINE_PAYLOAD"
    } else {
        "UPLOADED_FILE"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDescriptor {
    pub port: String,
    #[serde(flatten)]
    pub source: InputSource,
}

pub fn b64_encode(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn b64_decode(s: &str) -> Result<Vec<u8>, String> {
    base64::engine::general_purpose::STANDARD.decode(s).map_err(|e| e.to_string())
}
