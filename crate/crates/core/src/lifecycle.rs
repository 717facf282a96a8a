//! Per-run state machine.
//!
//! `Pending -> Initialized -> Started -> Running -> Finished | Error`.
//! Finished and Error are terminal. Every applied event is appended to the
//! record's history so the current state can be replayed from Pending.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::digest::Digest;
use crate::protocol::InputSource;
use crate::registry::{validate_hyperparameters, Assignment, ParamError, PortSchema, ToolVersion, VersionKey};

pub const DEFAULT_PENDING_TIMEOUT: Duration = Duration::from_secs(300);
pub const DEFAULT_LIVENESS_WINDOW: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RunState {
    Pending,
    Initialized,
    Started,
    Running,
    Finished,
    Error,
}

impl RunState {
    pub const ALL: [RunState; 6] = [
        RunState::Pending,
        RunState::Initialized,
        RunState::Started,
        RunState::Running,
        RunState::Finished,
        RunState::Error,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, RunState::Finished | RunState::Error)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunState::Pending => "PENDING",
            RunState::Initialized => "INITIALIZED",
            RunState::Started => "STARTED",
            RunState::Running => "RUNNING",
            RunState::Finished => "FINISHED",
            RunState::Error => "ERROR",
        }
    }
}

impl fmt::Display for RunState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    HandshakeCompleted,
    StartCommandAccepted,
    FunctionInvoked,
    CompletedOk,
    Failed,
    TimeoutExpired,
    TerminationRequested,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::HandshakeCompleted,
        EventKind::StartCommandAccepted,
        EventKind::FunctionInvoked,
        EventKind::CompletedOk,
        EventKind::Failed,
        EventKind::TimeoutExpired,
        EventKind::TerminationRequested,
    ];
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Legal transition table. `None` means the pair is illegal (or the state
/// is terminal).
pub fn next_state(state: RunState, event: EventKind) -> Option<RunState> {
    use EventKind as E;
    use RunState as S;
    if state.is_terminal() {
        return None;
    }
    match (state, event) {
        (S::Pending, E::HandshakeCompleted) => Some(S::Initialized),
        (S::Pending, E::TimeoutExpired) => Some(S::Error),
        (S::Initialized, E::StartCommandAccepted) => Some(S::Started),
        (S::Started, E::FunctionInvoked) => Some(S::Running),
        (S::Running, E::CompletedOk) => Some(S::Finished),
        (_, E::Failed) | (_, E::TerminationRequested) => Some(S::Error),
        _ => None,
    }
}

/// Structured error report attached to every run in Error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// `failed`, `timeout`, `terminated`, `liveness` or `upstream-failed`.
    pub reason: String,
    pub message: String,
    #[serde(default)]
    pub stack_trace: String,
    #[serde(default)]
    pub context: BTreeMap<String, String>,
}

impl ErrorReport {
    pub fn new(reason: &str, message: impl Into<String>) -> Self {
        ErrorReport {
            reason: reason.to_string(),
            message: message.into(),
            stack_trace: String::new(),
            context: BTreeMap::new(),
        }
    }

    pub fn with_context(mut self, key: &str, value: impl Into<String>) -> Self {
        self.context.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "detail")]
pub enum LifecycleEvent {
    HandshakeCompleted,
    StartCommandAccepted,
    FunctionInvoked,
    CompletedOk(BTreeMap<String, Digest>),
    Failed(ErrorReport),
    TimeoutExpired(String),
    TerminationRequested(Option<String>),
}

impl LifecycleEvent {
    pub fn kind(&self) -> EventKind {
        match self {
            LifecycleEvent::HandshakeCompleted => EventKind::HandshakeCompleted,
            LifecycleEvent::StartCommandAccepted => EventKind::StartCommandAccepted,
            LifecycleEvent::FunctionInvoked => EventKind::FunctionInvoked,
            LifecycleEvent::CompletedOk(_) => EventKind::CompletedOk,
            LifecycleEvent::Failed(_) => EventKind::Failed,
            LifecycleEvent::TimeoutExpired(_) => EventKind::TimeoutExpired,
            LifecycleEvent::TerminationRequested(_) => EventKind::TerminationRequested,
        }
    }

    /// A representative event of the given kind, for table-driven tests.
    pub fn sample(kind: EventKind) -> Self {
        match kind {
            EventKind::HandshakeCompleted => LifecycleEvent::HandshakeCompleted,
            EventKind::StartCommandAccepted => LifecycleEvent::StartCommandAccepted,
            EventKind::FunctionInvoked => LifecycleEvent::FunctionInvoked,
            EventKind::CompletedOk => LifecycleEvent::CompletedOk(BTreeMap::new()),
            EventKind::Failed => LifecycleEvent::Failed(ErrorReport::new("failed", "sample failure")),
            EventKind::TimeoutExpired => LifecycleEvent::TimeoutExpired("sample timeout".into()),
            EventKind::TerminationRequested => LifecycleEvent::TerminationRequested(None),
        }
    }

    fn detail(&self) -> Option<String> {
        match self {
            LifecycleEvent::Failed(r) => Some(r.message.clone()),
            LifecycleEvent::TimeoutExpired(d) => Some(d.clone()),
            LifecycleEvent::TerminationRequested(r) => r.clone(),
            _ => None,
        }
    }
}

/// One history entry. The creation entry has no event and no source state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub event: Option<EventKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub from: Option<RunState>,
    pub to: RunState,
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Telemetry {
    Log {
        level: String,
        message: String,
    },
    Metric {
        name: String,
        value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        step: Option<u64>,
    },
    Status {
        payload: serde_json::Value,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryEntry {
    pub at: Timestamp,
    #[serde(flatten)]
    pub entry: Telemetry,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LifecycleError {
    #[error("{0} is not published")]
    UnpublishedVersion(VersionKey),
    #[error("invalid configuration: {0}")]
    InvalidConfig(#[from] ParamError),
    #[error("illegal transition: {event} in state {state}")]
    IllegalTransition { state: RunState, event: EventKind },
    #[error("run is in terminal state {state}; {event} rejected")]
    TerminalState { state: RunState, event: EventKind },
    #[error("output contract violated: {0}")]
    OutputContract(String),
    #[error("telemetry is only accepted while STARTED or RUNNING, run is {0}")]
    TelemetryOutsideExecution(RunState),
}

/// One execution of one tool version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub tool: VersionKey,
    pub image_ref: Option<String>,
    pub input_ports: Vec<PortSchema>,
    pub output_ports: Vec<PortSchema>,
    pub config: Assignment,
    pub inputs: BTreeMap<String, InputSource>,
    pub state: RunState,
    pub created_at: Timestamp,
    pub pending_timeout_ms: u64,
    pub last_activity: Timestamp,
    pub history: Vec<Transition>,
    pub telemetry: Vec<TelemetryEntry>,
    pub outputs: BTreeMap<String, Digest>,
    pub error: Option<ErrorReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_id: Option<Digest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<String>,
}

pub fn new_run_id() -> String {
    format!("run-{:032x}", rand::random::<u128>())
}

/// Creates a Pending run of a published version. The configuration is
/// validated again against the version's schema.
pub fn create_run(
    version: &ToolVersion,
    config: &Assignment,
    inputs: BTreeMap<String, InputSource>,
    now: Timestamp,
    pending_timeout: Duration,
) -> Result<RunRecord, LifecycleError> {
    if !version.is_published() {
        return Err(LifecycleError::UnpublishedVersion(version.key()));
    }
    let config = validate_hyperparameters(&version.spec, config)?;
    Ok(RunRecord {
        run_id: new_run_id(),
        tool: version.key(),
        image_ref: version.image_ref.clone(),
        input_ports: version.spec.inputs.clone(),
        output_ports: version.spec.outputs.clone(),
        config,
        inputs,
        state: RunState::Pending,
        created_at: now,
        pending_timeout_ms: pending_timeout.as_millis() as u64,
        last_activity: now,
        history: vec![Transition { event: None, detail: None, from: None, to: RunState::Pending, at: now }],
        telemetry: Vec::new(),
        outputs: BTreeMap::new(),
        error: None,
        plan_id: None,
        node_id: None,
    })
}

impl RunRecord {
    pub fn pending_timeout(&self) -> Duration {
        Duration::from_millis(self.pending_timeout_ms)
    }

    pub fn pending_deadline(&self) -> Timestamp {
        self.created_at.saturating_add(self.pending_timeout())
    }

    /// Applies one event. On error the record is left untouched.
    pub fn apply_event(&mut self, event: LifecycleEvent, at: Timestamp) -> Result<RunState, LifecycleError> {
        let kind = event.kind();
        if self.state.is_terminal() {
            return Err(LifecycleError::TerminalState { state: self.state, event: kind });
        }
        let to =
            next_state(self.state, kind).ok_or(LifecycleError::IllegalTransition { state: self.state, event: kind })?;
        if let LifecycleEvent::CompletedOk(outputs) = &event {
            self.check_outputs(outputs)?;
        }
        let detail = event.detail();
        match event {
            LifecycleEvent::CompletedOk(outputs) => self.outputs = outputs,
            LifecycleEvent::Failed(report) => self.error = Some(report),
            LifecycleEvent::TimeoutExpired(d) => {
                self.error = Some(
                    ErrorReport::new("timeout", format!("pending timeout expired: {d}"))
                        .with_context("timeout_ms", self.pending_timeout_ms.to_string()),
                )
            }
            LifecycleEvent::TerminationRequested(r) => {
                let mut report = ErrorReport::new("terminated", "terminated");
                if let Some(r) = r {
                    report = report.with_context("requested_reason", r);
                }
                self.error = Some(report);
            }
            _ => {}
        }
        self.history.push(Transition { event: Some(kind), detail, from: Some(self.state), to, at });
        self.state = to;
        self.last_activity = at;
        Ok(to)
    }

    fn check_outputs(&self, outputs: &BTreeMap<String, Digest>) -> Result<(), LifecycleError> {
        if let Some(name) = outputs.keys().find(|n| !self.output_ports.iter().any(|p| &p.name == *n)) {
            return Err(LifecycleError::OutputContract(format!("undeclared output `{name}`")));
        }
        let missing = self.missing_outputs(outputs);
        if !missing.is_empty() {
            return Err(LifecycleError::OutputContract(format!("missing required outputs: {}", missing.join(", "))));
        }
        Ok(())
    }

    /// Required output ports without an artifact in `outputs`.
    pub fn missing_outputs(&self, outputs: &BTreeMap<String, Digest>) -> Vec<String> {
        self.output_ports
            .iter()
            .filter(|p| p.required && !outputs.contains_key(&p.name))
            .map(|p| p.name.clone())
            .collect()
    }

    /// Moves a Pending run to Error once `now - created >= timeout`.
    /// Returns whether the run expired.
    pub fn expire_timeouts(&mut self, now: Timestamp, timeout: Duration) -> bool {
        if self.state != RunState::Pending || now.elapsed_since(self.created_at) < timeout {
            return false;
        }
        let detail = format!("no handshake within {} ms", timeout.as_millis());
        self.apply_event(LifecycleEvent::TimeoutExpired(detail), now).is_ok()
    }

    /// Fails a Running run that has been silent for at least `window`.
    pub fn check_liveness(&mut self, now: Timestamp, window: Duration) -> bool {
        if self.state != RunState::Running || now.elapsed_since(self.last_activity) < window {
            return false;
        }
        let report = ErrorReport::new("liveness", format!("no message for {} ms", window.as_millis()));
        self.apply_event(LifecycleEvent::Failed(report), now).is_ok()
    }

    pub fn record_telemetry(&mut self, entry: Telemetry, at: Timestamp) -> Result<(), LifecycleError> {
        if !matches!(self.state, RunState::Started | RunState::Running) {
            return Err(LifecycleError::TelemetryOutsideExecution(self.state));
        }
        self.telemetry.push(TelemetryEntry { at, entry });
        self.last_activity = at;
        Ok(())
    }

    /// Folds the history through the transition table. Returns the replayed
    /// state, or `None` if the history is not a legal path from Pending.
    pub fn replay(&self) -> Option<RunState> {
        let (first, rest) = self.history.split_first()?;
        if first.event.is_some() || first.from.is_some() || first.to != RunState::Pending {
            return None;
        }
        let mut state = RunState::Pending;
        for t in rest {
            if t.from != Some(state) || next_state(state, t.event?) != Some(t.to) {
                return None;
            }
            state = t.to;
        }
        Some(state)
    }
}
