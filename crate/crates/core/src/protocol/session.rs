//! Engine side of one run's control session.

use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::{json, Value};

use super::token::{AuthError, TokenIssuer};
use super::transport::{Connection, TransportError};
use super::{b64_decode, Envelope, InputDescriptor, MsgType};
use crate::clock::Timestamp;
use crate::digest::Digest;
use crate::lifecycle::{ErrorReport, EventKind, LifecycleError, LifecycleEvent, RunRecord, RunState, Telemetry};
use crate::registry::{Assignment, DataKind};

/// Where OUTPUT_ARTIFACT bytes are stored.
pub trait ArtifactSink: Send + Sync {
    fn put(&self, bytes: &[u8], kind: Option<DataKind>) -> Digest;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error("sequence regression: got {got} after {last}")]
    SequenceRegression { last: u64, got: u64 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("output `{0}` is not a declared output port")]
    UndeclaredOutput(String),
    #[error("{0} received before the handshake completed")]
    NotAuthenticated(MsgType),
    #[error("run is {0}, expected INITIALIZED")]
    NotInitialized(RunState),
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Per-run session state: authentication, sequence tracking and outputs
/// staged ahead of RUN_FINISHED.
#[derive(Debug, Clone)]
pub struct EngineSession {
    run_id: String,
    dev_mode: bool,
    authenticated: bool,
    last_inbound: Option<u64>,
    next_outbound: u64,
    staged: BTreeMap<String, Digest>,
}

impl EngineSession {
    pub fn new(run_id: &str, dev_mode: bool) -> Self {
        EngineSession {
            run_id: run_id.to_string(),
            dev_mode,
            authenticated: false,
            last_inbound: None,
            next_outbound: 0,
            staged: BTreeMap::new(),
        }
    }

    pub fn is_authenticated(&self) -> bool {
        self.authenticated
    }

    pub fn staged_outputs(&self) -> &BTreeMap<String, Digest> {
        &self.staged
    }

    pub fn next_seq(&mut self) -> u64 {
        let s = self.next_outbound;
        self.next_outbound += 1;
        s
    }

    fn check_seq(&mut self, seq: u64) -> Result<(), SessionError> {
        if let Some(last) = self.last_inbound {
            if seq <= last {
                return Err(SessionError::SequenceRegression { last, got: seq });
            }
        }
        self.last_inbound = Some(seq);
        Ok(())
    }

    /// Verifies a HELLO frame and, on success, returns the HELLO_ACK to send
    /// and moves the run to Initialized.
    pub fn accept_hello(
        &mut self,
        env: &Envelope,
        issuer: &TokenIssuer,
        run: &mut RunRecord,
        now: Timestamp,
    ) -> Result<Envelope, SessionError> {
        if self.authenticated {
            return Err(SessionError::Protocol("duplicate HELLO".into()));
        }
        if env.msg_type != MsgType::Hello {
            return Err(SessionError::NotAuthenticated(env.msg_type));
        }
        self.check_seq(env.seq)?;
        if env.run_id != run.run_id || self.run_id != run.run_id {
            return Err(AuthError::IdentityMismatch { bound: run.run_id.clone(), presented: env.run_id.clone() }.into());
        }
        let token = env.payload.get("token").and_then(Value::as_str).unwrap_or_default();
        let tool_id = env.payload.get("tool_id").and_then(Value::as_str).unwrap_or_default();
        let version = env.payload.get("version").and_then(Value::as_str).unwrap_or_default();
        if tool_id != run.tool.tool_id.as_str() || version != run.tool.version.to_string() {
            return Err(AuthError::IdentityMismatch {
                bound: run.tool.to_string(),
                presented: format!("{tool_id}@{version}"),
            }
            .into());
        }
        issuer.verify(token, &run.run_id, now)?;
        run.apply_event(LifecycleEvent::HandshakeCompleted, now)?;
        self.authenticated = true;
        let seq = self.next_seq();
        Ok(Envelope::new(MsgType::HelloAck, &run.run_id, seq, json!({ "accepted": true, "dev_mode": self.dev_mode })))
    }

    /// Builds and records the START_RUN command.
    pub fn start(
        &mut self,
        run: &mut RunRecord,
        inputs: Vec<InputDescriptor>,
        now: Timestamp,
    ) -> Result<Envelope, SessionError> {
        if !self.authenticated {
            return Err(SessionError::NotAuthenticated(MsgType::StartRun));
        }
        let env = build_start_message(run, inputs, self.next_outbound)?;
        run.apply_event(LifecycleEvent::StartCommandAccepted, now)?;
        self.next_outbound += 1;
        Ok(env)
    }

    /// CONFIGURE is only available in development-mode sessions.
    pub fn configure(&mut self, assignment: &Assignment) -> Result<Envelope, SessionError> {
        if !self.dev_mode {
            return Err(SessionError::Protocol("CONFIGURE is only accepted in development mode".into()));
        }
        let seq = self.next_seq();
        Ok(Envelope::new(MsgType::Configure, &self.run_id, seq, json!({ "hyperparameters": assignment })))
    }

    pub fn terminate(
        &mut self,
        run: &mut RunRecord,
        reason: Option<&str>,
        now: Timestamp,
    ) -> Result<Envelope, SessionError> {
        run.apply_event(LifecycleEvent::TerminationRequested(reason.map(str::to_string)), now)?;
        let seq = self.next_seq();
        Ok(Envelope::new(MsgType::Terminate, &self.run_id, seq, json!({ "reason": reason })))
    }

    /// Handles one frame from the tool. Returns the lifecycle events it
    /// caused.
    pub fn process_incoming(
        &mut self,
        run: &mut RunRecord,
        env: &Envelope,
        sink: &dyn ArtifactSink,
        now: Timestamp,
    ) -> Result<Vec<EventKind>, SessionError> {
        if !self.authenticated {
            return Err(SessionError::NotAuthenticated(env.msg_type));
        }
        if env.run_id != self.run_id {
            return Err(SessionError::Protocol(format!("frame for run {} on session {}", env.run_id, self.run_id)));
        }
        self.check_seq(env.seq)?;
        let p = &env.payload;
        let mut events = Vec::new();
        match env.msg_type {
            MsgType::StatusUpdate => {
                if p.get("state").and_then(Value::as_str) == Some("RUNNING") && run.state == RunState::Started {
                    run.apply_event(LifecycleEvent::FunctionInvoked, now)?;
                    events.push(EventKind::FunctionInvoked);
                }
                run.record_telemetry(Telemetry::Status { payload: p.clone() }, now)?;
            }
            MsgType::Log => {
                let message = str_field(p, "message")?;
                let level = p.get("level").and_then(Value::as_str).unwrap_or("info").to_string();
                run.record_telemetry(Telemetry::Log { level, message }, now)?;
            }
            MsgType::Metric => {
                let name = str_field(p, "name")?;
                let value = p
                    .get("value")
                    .and_then(Value::as_f64)
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| SessionError::Protocol("METRIC needs a finite numeric `value`".into()))?;
                let step = p.get("step").and_then(Value::as_u64);
                run.record_telemetry(Telemetry::Metric { name, value, step }, now)?;
            }
            MsgType::OutputArtifact => {
                if run.state != RunState::Running {
                    return Err(SessionError::Protocol(format!("OUTPUT_ARTIFACT while {}", run.state)));
                }
                let name = str_field(p, "name")?;
                let Some(port) = run.output_ports.iter().find(|o| o.name == name) else {
                    return Err(SessionError::UndeclaredOutput(name));
                };
                if self.staged.contains_key(&name) {
                    return Err(SessionError::Protocol(format!("output `{name}` sent twice")));
                }
                let bytes = b64_decode(&str_field(p, "data")?).map_err(SessionError::Protocol)?;
                let digest = sink.put(&bytes, Some(port.kind));
                self.staged.insert(name, digest);
                run.last_activity = now;
            }
            MsgType::RunFinished => {
                let missing = run.missing_outputs(&self.staged);
                if missing.is_empty() {
                    run.apply_event(LifecycleEvent::CompletedOk(self.staged.clone()), now)?;
                    events.push(EventKind::CompletedOk);
                } else {
                    let report =
                        ErrorReport::new("failed", format!("missing required outputs: {}", missing.join(", ")))
                            .with_context("phase", "RUN_FINISHED");
                    run.apply_event(LifecycleEvent::Failed(report), now)?;
                    events.push(EventKind::Failed);
                }
            }
            MsgType::RunError => {
                let mut report = ErrorReport::new(
                    "failed",
                    p.get("message").and_then(Value::as_str).unwrap_or("tool reported an error"),
                );
                report.stack_trace = p.get("stack_trace").and_then(Value::as_str).unwrap_or_default().to_string();
                if let Some(ctx) = p.get("context").and_then(Value::as_object) {
                    for (k, v) in ctx {
                        let v = v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string());
                        report.context.insert(k.clone(), v);
                    }
                }
                run.apply_event(LifecycleEvent::Failed(report), now)?;
                events.push(EventKind::Failed);
            }
            MsgType::Hello => return Err(SessionError::Protocol("duplicate HELLO".into())),
            other => return Err(SessionError::Protocol(format!("{other} is not sent by tools"))),
        }
        Ok(events)
    }
}

fn str_field(p: &Value, key: &str) -> Result<String, SessionError> {
    p.get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| SessionError::Protocol(format!("missing string field `{key}`")))
}

/// START_RUN carrying the validated assignment and one descriptor per
/// bound input port.
pub fn build_start_message(run: &RunRecord, inputs: Vec<InputDescriptor>, seq: u64) -> Result<Envelope, SessionError> {
    if run.state != RunState::Initialized {
        return Err(SessionError::NotInitialized(run.state));
    }
    for d in &inputs {
        d.source.check().map_err(|e| SessionError::Protocol(format!("input `{}`: {e}", d.port)))?;
    }
    Ok(Envelope::new(
        MsgType::StartRun,
        &run.run_id,
        seq,
        json!({
            "tool_id": run.tool.tool_id,
            "version": run.tool.version,
            "hyperparameters": run.config,
            "inputs": inputs,
        }),
    ))
}

/// Waits for HELLO on `conn`, verifies it and answers with HELLO_ACK.
/// Frames other than HELLO are rejected without being processed.
pub fn perform_handshake(
    conn: &mut dyn Connection,
    issuer: &TokenIssuer,
    run: &mut RunRecord,
    now: impl Fn() -> Timestamp,
    dev_mode: bool,
    timeout: Option<Duration>,
) -> Result<EngineSession, SessionError> {
    let mut session = EngineSession::new(&run.run_id, dev_mode);
    let env = conn.recv(timeout)?;
    let ack = session.accept_hello(&env, issuer, run, now())?;
    conn.send(&ack)?;
    Ok(session)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifecycle::{create_run, DEFAULT_PENDING_TIMEOUT};
    use crate::protocol::{InputSource, ToolClient};
    use crate::registry::{
        DataKind, HyperparameterDef, PortSchema, ToolId, ToolSpec, ToolType, ToolVersion, ValueKind, VersionLabel,
        VersionState,
    };
    use std::sync::Mutex;

    #[derive(Default)]
    pub(crate) struct VecSink(pub Mutex<Vec<Vec<u8>>>);

    impl ArtifactSink for VecSink {
        fn put(&self, bytes: &[u8], _: Option<DataKind>) -> Digest {
            self.0.lock().unwrap().push(bytes.to_vec());
            Digest::of(bytes)
        }
    }

    fn splitter() -> ToolVersion {
        let spec = ToolSpec {
            tool_id: ToolId::new("train-test-split"),
            title: "Train-Test-Split".into(),
            tool_type: ToolType::Preprocessing,
            description: String::new(),
            inputs: vec![PortSchema::new("input", DataKind::Csv)],
            outputs: vec![PortSchema::new("train", DataKind::Csv), PortSchema::new("test", DataKind::Csv)],
            hyperparameters: vec![HyperparameterDef::new("shuffle", ValueKind::Boolean).with_default(true)],
            repository: String::new(),
        };
        ToolVersion {
            tool_id: spec.tool_id.clone(),
            version: VersionLabel { major: 1, minor: 0, patch: 0 },
            spec,
            state: VersionState::Published,
            image_ref: Some("img".into()),
            release_summary_ref: Some(Digest::of(b"s")),
        }
    }

    fn handshaken() -> (RunRecord, EngineSession) {
        let v = splitter();
        let mut run =
            create_run(&v, &Assignment::new(), BTreeMap::new(), Timestamp(0), DEFAULT_PENDING_TIMEOUT).unwrap();
        let issuer = TokenIssuer::new(None);
        let token = issuer.issue(&run.run_id, Timestamp(1000));
        let mut s = EngineSession::new(&run.run_id, false);
        let hello = ToolClient::<crate::protocol::MemoryConnection>::hello_envelope(&run.run_id, 0, &token, &v.key());
        s.accept_hello(&hello, &issuer, &mut run, Timestamp(1)).unwrap();
        (run, s)
    }

    fn frame(id: &str, t: MsgType, seq: u64, payload: Value) -> Envelope {
        Envelope::new(t, id, seq, payload)
    }

    #[test]
    fn full_session() {
        let (mut run, mut s) = handshaken();
        let id = run.run_id.clone();
        assert_eq!(run.state, RunState::Initialized);
        let start = s
            .start(
                &mut run,
                vec![InputDescriptor { port: "input".into(), source: InputSource::inline(b"a\n1\n") }],
                Timestamp(2),
            )
            .unwrap();
        assert_eq!(start.payload["inputs"].as_array().unwrap().len(), 1);
        assert_eq!(start.payload["hyperparameters"]["shuffle"], json!(true));
        let sink = VecSink::default();
        let steps = [
            (MsgType::StatusUpdate, json!({"state": "RUNNING"})),
            (MsgType::Log, json!({"message": "splitting"})),
            (MsgType::Metric, json!({"name": "rows", "value": 100})),
            (MsgType::OutputArtifact, json!({"name": "train", "data": crate::protocol::b64_encode(b"a\n1\n")})),
            (MsgType::OutputArtifact, json!({"name": "test", "data": crate::protocol::b64_encode(b"a\n")})),
            (MsgType::RunFinished, json!({})),
        ];
        for (i, (t, p)) in steps.into_iter().enumerate() {
            s.process_incoming(&mut run, &frame(&id, t, i as u64 + 1, p), &sink, Timestamp(3)).unwrap();
        }
        assert_eq!(run.state, RunState::Finished);
        assert_eq!(run.outputs.len(), 2);
        assert_eq!(run.telemetry.len(), 3);
    }

    #[test]
    fn undeclared_output() {
        let (mut run, mut s) = handshaken();
        let id = run.run_id.clone();
        s.start(&mut run, vec![], Timestamp(2)).unwrap();
        let sink = VecSink::default();
        s.process_incoming(
            &mut run,
            &frame(&id, MsgType::StatusUpdate, 1, json!({"state": "RUNNING"})),
            &sink,
            Timestamp(3),
        )
        .unwrap();
        let bogus = frame(&id, MsgType::OutputArtifact, 2, json!({"name": "bogus", "data": ""}));
        assert_eq!(
            s.process_incoming(&mut run, &bogus, &sink, Timestamp(3)),
            Err(SessionError::UndeclaredOutput("bogus".into()))
        );
    }

    #[test]
    fn sequence_regression() {
        let (mut run, mut s) = handshaken();
        let id = run.run_id.clone();
        s.start(&mut run, vec![], Timestamp(2)).unwrap();
        let sink = VecSink::default();
        s.process_incoming(
            &mut run,
            &frame(&id, MsgType::StatusUpdate, 1, json!({"state": "RUNNING"})),
            &sink,
            Timestamp(3),
        )
        .unwrap();
        let again = frame(&id, MsgType::Log, 1, json!({"message": "x"}));
        assert_eq!(
            s.process_incoming(&mut run, &again, &sink, Timestamp(3)),
            Err(SessionError::SequenceRegression { last: 1, got: 1 })
        );
    }

    #[test]
    fn missing_outputs_fail_run() {
        let (mut run, mut s) = handshaken();
        let id = run.run_id.clone();
        s.start(&mut run, vec![], Timestamp(2)).unwrap();
        let sink = VecSink::default();
        s.process_incoming(
            &mut run,
            &frame(&id, MsgType::StatusUpdate, 1, json!({"state": "RUNNING"})),
            &sink,
            Timestamp(3),
        )
        .unwrap();
        s.process_incoming(&mut run, &frame(&id, MsgType::RunFinished, 2, json!({})), &sink, Timestamp(3)).unwrap();
        assert_eq!(run.state, RunState::Error);
        assert!(run.error.as_ref().unwrap().message.contains("train"));
    }

    #[test]
    fn nothing_before_hello_ack() {
        let v = splitter();
        let mut run =
            create_run(&v, &Assignment::new(), BTreeMap::new(), Timestamp(0), DEFAULT_PENDING_TIMEOUT).unwrap();
        let mut s = EngineSession::new(&run.run_id, false);
        let id = run.run_id.clone();
        let log = frame(&id, MsgType::Log, 0, json!({"message": "early"}));
        assert!(matches!(
            s.process_incoming(&mut run, &log, &VecSink::default(), Timestamp(1)),
            Err(SessionError::NotAuthenticated(MsgType::Log))
        ));
        let issuer = TokenIssuer::new(None);
        assert!(matches!(
            s.accept_hello(&log, &issuer, &mut run, Timestamp(1)),
            Err(SessionError::NotAuthenticated(_))
        ));
        assert_eq!(run.state, RunState::Pending);
        assert!(run.telemetry.is_empty());
    }

    #[test]
    fn configure_needs_dev_mode() {
        let mut prod = EngineSession::new("r", false);
        assert!(matches!(prod.configure(&Assignment::new()), Err(SessionError::Protocol(_))));
        let mut dev = EngineSession::new("r", true);
        assert_eq!(dev.configure(&Assignment::new()).unwrap().msg_type, MsgType::Configure);
    }

    #[test]
    fn start_requires_initialized() {
        let v = splitter();
        let run = create_run(&v, &Assignment::new(), BTreeMap::new(), Timestamp(0), DEFAULT_PENDING_TIMEOUT).unwrap();
        assert_eq!(build_start_message(&run, vec![], 0), Err(SessionError::NotInitialized(RunState::Pending)));
    }

    #[test]
    fn run_error_report() {
        let (mut run, mut s) = handshaken();
        let id = run.run_id.clone();
        s.start(&mut run, vec![], Timestamp(2)).unwrap();
        let err = frame(
            &id,
            MsgType::RunError,
            1,
            json!({"message": "boom", "stack_trace": "at main", "context": {"step": 3}}),
        );
        s.process_incoming(&mut run, &err, &VecSink::default(), Timestamp(3)).unwrap();
        let rep = run.error.unwrap();
        assert_eq!((rep.message.as_str(), rep.stack_trace.as_str()), ("boom", "at main"));
        assert_eq!(rep.context["step"], "3");
    }
}
