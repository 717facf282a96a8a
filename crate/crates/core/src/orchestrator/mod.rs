//! Execution coordination: executor bindings, tokens, input provisioning,
//! run driving and workflow scheduling. Durable state lives behind the
//! [`Backend`] facade.

pub mod backend;
pub mod fixtures;
pub mod store;
pub mod stubs;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use backend::{Backend, ExecutionRecord, InputProvenance, ProvenanceRecord};
pub use store::{ArtifactStore, StoreError};
pub use stubs::{StubCatalog, StubTool};

use crate::clock::{Clock, MonotonicClock};
use crate::digest::Digest;
use crate::lifecycle::{
    create_run, new_run_id, ErrorReport, LifecycleError, LifecycleEvent, RunRecord, RunState, DEFAULT_LIVENESS_WINDOW,
    DEFAULT_PENDING_TIMEOUT,
};
use crate::protocol::{
    memory_pair, perform_handshake, Connection, EngineListener, InputDescriptor, InputSource, SessionError, Token,
    TokenIssuer, ToolClient, ToolRequest, TransportError, INLINE_THRESHOLD,
};
use crate::registry::{Assignment, RegistryError, VersionKey};
use crate::workflow::{instantiate_execution, validate_graph, Violation, WorkflowError, WorkflowGraph};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OrchestratorError {
    #[error("executor unavailable: {0}")]
    ExecutorUnavailable(String),
    #[error("run {0} is already scheduled")]
    AlreadyScheduled(String),
    #[error("run {run_id} is {state}, expected PENDING")]
    NotPending { run_id: String, state: RunState },
    #[error("run {run_id}: required input `{port}` is not bound")]
    UnboundRequiredInput { run_id: String, port: String },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("corrupt record {0}")]
    CorruptRecord(String),
    #[error("run {run_id} is {state}, not terminal")]
    NonTerminalRun { run_id: String, state: RunState },
    #[error("record of terminal run {0} cannot change")]
    TerminalRecord(String),
    #[error("invalid workflow: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidWorkflow(Vec<Violation>),
    #[error(transparent)]
    Artifact(#[from] StoreError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error("storage: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    /// Scripted tool running in-process over a memory channel.
    Simulated,
    /// Container started through the runtime binary, connecting over TCP.
    ExternalContainer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingStatus {
    Scheduled,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorBinding {
    pub run_id: String,
    pub kind: ExecutorKind,
    pub token: Token,
    pub status: BindingStatus,
}

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    pub pending_timeout: Duration,
    pub liveness_window: Duration,
    /// How long a launched tool may take to connect and say HELLO.
    pub handshake_timeout: Duration,
    pub container_runtime: PathBuf,
    pub engine_addr: String,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            pending_timeout: DEFAULT_PENDING_TIMEOUT,
            liveness_window: DEFAULT_LIVENESS_WINDOW,
            handshake_timeout: Duration::from_secs(30),
            container_runtime: PathBuf::from("docker"),
            engine_addr: std::env::var("POSY_ENGINE_ADDR").unwrap_or_else(|_| "127.0.0.1:0".into()),
        }
    }
}

pub type RunObserver = Arc<dyn Fn(&RunRecord) + Send + Sync>;

/// Outcome of one workflow execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowReport {
    pub execution_id: String,
    pub workflow_id: String,
    pub plan_id: Digest,
    pub order: Vec<String>,
    pub runs: BTreeMap<String, RunRecord>,
}

impl WorkflowReport {
    pub fn states(&self) -> BTreeMap<String, RunState> {
        self.runs.iter().map(|(n, r)| (n.clone(), r.state)).collect()
    }

    pub fn all_finished(&self) -> bool {
        self.runs.values().all(|r| r.state == RunState::Finished)
    }

    /// Every output checksum of every node, sorted.
    pub fn output_checksums(&self) -> Vec<Digest> {
        let mut v: Vec<Digest> = self.runs.values().flat_map(|r| r.outputs.values().copied()).collect();
        v.sort();
        v
    }
}

/// The orchestration facade.
pub struct Orchestrator {
    backend: Arc<Backend>,
    stubs: StubCatalog,
    issuer: TokenIssuer,
    clock: Arc<dyn Clock>,
    config: OrchestratorConfig,
    bindings: Mutex<BTreeMap<String, ExecutorBinding>>,
    observer: Option<RunObserver>,
}

impl Orchestrator {
    pub fn new(backend: Arc<Backend>, stubs: StubCatalog) -> Self {
        Orchestrator {
            backend,
            stubs,
            issuer: TokenIssuer::from_env(),
            clock: Arc::new(MonotonicClock::new()),
            config: OrchestratorConfig::default(),
            bindings: Mutex::default(),
            observer: None,
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_issuer(mut self, issuer: TokenIssuer) -> Self {
        self.issuer = issuer;
        self
    }

    pub fn with_config(mut self, config: OrchestratorConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_observer(mut self, observer: RunObserver) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn issuer(&self) -> &TokenIssuer {
        &self.issuer
    }

    pub fn binding(&self, run_id: &str) -> Option<ExecutorBinding> {
        self.bindings.lock().unwrap().get(run_id).cloned()
    }

    fn notify(&self, run: &RunRecord) {
        if let Some(o) = &self.observer {
            o(run);
        }
    }

    /// Creates and persists a Pending run of a published version.
    pub fn create_run(
        &self,
        key: &VersionKey,
        config: &Assignment,
        inputs: BTreeMap<String, InputSource>,
    ) -> Result<RunRecord, OrchestratorError> {
        let version = self.backend.registry.get(key)?;
        let run = create_run(&version, config, inputs, self.clock.now(), self.config.pending_timeout)?;
        self.backend.persist_run(&run)?;
        Ok(run)
    }

    /// Binds a Pending run to an executor and issues its single-use token.
    pub fn schedule_run(&self, run: &RunRecord, kind: ExecutorKind) -> Result<ExecutorBinding, OrchestratorError> {
        if run.state != RunState::Pending {
            return Err(OrchestratorError::NotPending { run_id: run.run_id.clone(), state: run.state });
        }
        let mut bindings = self.bindings.lock().unwrap();
        if bindings.contains_key(&run.run_id) {
            return Err(OrchestratorError::AlreadyScheduled(run.run_id.clone()));
        }
        match kind {
            ExecutorKind::Simulated => {
                if self.stubs.get(&run.tool.tool_id).is_none() {
                    return Err(OrchestratorError::ExecutorUnavailable(format!("no simulated tool for {}", run.tool)));
                }
            }
            ExecutorKind::ExternalContainer => {
                if run.image_ref.is_none() {
                    return Err(OrchestratorError::ExecutorUnavailable(format!("{} has no image", run.tool)));
                }
                if !runtime_available(&self.config.container_runtime) {
                    return Err(OrchestratorError::ExecutorUnavailable(format!(
                        "container runtime `{}` not found",
                        self.config.container_runtime.display()
                    )));
                }
            }
        }
        self.provision_inputs(run)?;
        let token = self.issuer.issue(&run.run_id, run.pending_deadline());
        let binding = ExecutorBinding { run_id: run.run_id.clone(), kind, token, status: BindingStatus::Scheduled };
        bindings.insert(run.run_id.clone(), binding.clone());
        Ok(binding)
    }

    /// Chooses the delivery mechanism per bound input port. Stored
    /// artifacts up to [`INLINE_THRESHOLD`] bytes go inline, larger ones as
    /// uploaded files; container paths and download references pass
    /// through.
    pub fn provision_inputs(&self, run: &RunRecord) -> Result<Vec<InputDescriptor>, OrchestratorError> {
        let mut out = Vec::new();
        for port in &run.input_ports {
            let Some(source) = run.inputs.get(&port.name) else {
                if port.required {
                    return Err(OrchestratorError::UnboundRequiredInput {
                        run_id: run.run_id.clone(),
                        port: port.name.clone(),
                    });
                }
                continue;
            };
            let source = match source {
                InputSource::UploadedFile { artifact } => {
                    if self.backend.store.size(artifact)? <= INLINE_THRESHOLD {
                        InputSource::inline(&self.backend.store.get(artifact)?)
                    } else {
                        source.clone()
                    }
                }
                other => other.clone(),
            };
            out.push(InputDescriptor { port: port.name.clone(), source });
        }
        Ok(out)
    }

    /// Runs one Pending run to a terminal state, then persists it and
    /// records provenance. Tool-side failures end the run in Error and are
    /// not returned as errors.
    pub fn execute_run(&self, run: &mut RunRecord, kind: ExecutorKind) -> Result<RunState, OrchestratorError> {
        let binding = match self.binding(&run.run_id) {
            Some(b) => b,
            None => self.schedule_run(run, kind)?,
        };
        let descriptors = self.provision_inputs(run)?;
        let outcome = match binding.kind {
            ExecutorKind::Simulated => self.launch_simulated(run, &binding.token, descriptors),
            ExecutorKind::ExternalContainer => self.launch_container(run, &binding.token, descriptors),
        };
        if let Err(report) = outcome {
            if !run.state.is_terminal() {
                run.apply_event(LifecycleEvent::Failed(report), self.clock.now())?;
                self.notify(run);
            }
        }
        self.issuer.revoke_run(&run.run_id);
        if let Some(b) = self.bindings.lock().unwrap().get_mut(&run.run_id) {
            b.status = if run.state == RunState::Finished { BindingStatus::Completed } else { BindingStatus::Failed };
        }
        self.backend.persist_run(run)?;
        self.backend.record_provenance(run)?;
        Ok(run.state)
    }

    fn launch_simulated(
        &self,
        run: &mut RunRecord,
        token: &Token,
        descriptors: Vec<InputDescriptor>,
    ) -> Result<(), ErrorReport> {
        let stub = self.stubs.get(&run.tool.tool_id).cloned().expect("checked at scheduling");
        let (mut engine, tool) = memory_pair();
        let (run_id, key, timeout) = (run.run_id.clone(), run.tool.clone(), self.config.handshake_timeout);
        let store = &self.backend.store;
        std::thread::scope(|s| {
            s.spawn(move || simulated_tool(tool, &run_id, token, &key, &stub, store, timeout));
            let r = self.drive(&mut engine, run, descriptors);
            // Closing the engine end lets a still-waiting tool exit.
            drop(engine);
            r
        })
    }

    fn launch_container(
        &self,
        run: &mut RunRecord,
        token: &Token,
        descriptors: Vec<InputDescriptor>,
    ) -> Result<(), ErrorReport> {
        let fail = |m: String| ErrorReport::new("executor", m);
        let listener = EngineListener::bind(&self.config.engine_addr).map_err(|e| fail(e.to_string()))?;
        let addr = listener.local_addr().map_err(|e| fail(e.to_string()))?;
        let image = run.image_ref.clone().unwrap_or_default();
        let mut child = Command::new(&self.config.container_runtime)
            .args(["run", "--rm", "--network", "host", &image])
            .args(["--engine", &addr.to_string(), "--run-id", &run.run_id, "--token", token.as_str()])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| fail(format!("cannot start container: {e}")))?;
        let res = match listener.accept_timeout(self.config.handshake_timeout) {
            Ok(Some(mut conn)) => self.drive(&mut conn, run, descriptors),
            Ok(None) => Err(fail("container did not connect".into())),
            Err(e) => Err(fail(e.to_string())),
        };
        let _ = child.kill();
        let _ = child.wait();
        res
    }

    /// Engine side of one session: handshake, START_RUN, then frames until
    /// the run is terminal.
    fn drive(
        &self,
        conn: &mut dyn Connection,
        run: &mut RunRecord,
        descriptors: Vec<InputDescriptor>,
    ) -> Result<(), ErrorReport> {
        let now = || self.clock.now();
        let mut session = perform_handshake(conn, &self.issuer, run, now, false, Some(self.config.handshake_timeout))
            .map_err(report)?;
        self.notify(run);
        let start = session.start(run, descriptors, now()).map_err(report)?;
        conn.send(&start).map_err(|e| report(e.into()))?;
        self.notify(run);
        while !run.state.is_terminal() {
            match conn.recv(Some(self.config.liveness_window)) {
                Ok(env) => {
                    let events = session.process_incoming(run, &env, &self.backend.store, now()).map_err(report)?;
                    if !events.is_empty() {
                        self.notify(run);
                    }
                }
                Err(TransportError::Timeout) => {
                    let window = self.config.liveness_window.as_millis();
                    return Err(ErrorReport::new("liveness", format!("no message for {window} ms")));
                }
                Err(e) => return Err(report(e.into())),
            }
        }
        Ok(())
    }

    /// Validates, instantiates and executes a workflow. Ready nodes run
    /// concurrently; a failed node fails its transitive dependents.
    pub fn run_workflow(&self, graph: &WorkflowGraph, kind: ExecutorKind) -> Result<WorkflowReport, OrchestratorError> {
        let plan = validate_graph(graph, &self.backend.registry).map_err(OrchestratorError::InvalidWorkflow)?;
        let mut exec =
            instantiate_execution(&plan, &self.backend.registry, self.clock.now(), self.config.pending_timeout)?;
        let record = ExecutionRecord {
            execution_id: format!("wf-{}", &new_run_id()[4..]),
            workflow_id: plan.workflow_id.clone(),
            plan_id: plan.plan_id,
            order: plan.order.clone(),
            runs: exec.runs.iter().map(|(n, r)| (n.clone(), r.run_id.clone())).collect(),
        };
        for r in exec.runs.values() {
            self.backend.persist_run(r)?;
        }
        self.backend.persist_execution(&record)?;
        loop {
            let batch = exec.take_ready();
            if batch.is_empty() {
                break;
            }
            let results: Vec<(String, Result<RunRecord, OrchestratorError>)> = std::thread::scope(|s| {
                let handles: Vec<_> = batch
                    .iter()
                    .map(|node| {
                        let mut run = exec.run(node).expect("planned").clone();
                        let h = s.spawn(move || self.execute_run(&mut run, kind).map(|_| run));
                        (node.clone(), h)
                    })
                    .collect();
                handles.into_iter().map(|(n, h)| (n, h.join().expect("executor thread"))).collect()
            });
            for (node, result) in results {
                let run = result?;
                let finished = run.state == RunState::Finished;
                *exec.run_mut(&node).expect("planned") = run;
                let failed = if finished {
                    match exec.propagate_outputs(&node) {
                        Ok(_) => Vec::new(),
                        Err(WorkflowError::MissingOutput { .. }) => exec.fail_downstream(&node, self.clock.now()),
                        Err(e) => return Err(e.into()),
                    }
                } else {
                    exec.fail_downstream(&node, self.clock.now())
                };
                for d in failed {
                    let r = exec.run(&d).expect("planned");
                    self.backend.persist_run(r)?;
                    self.backend.record_provenance(r)?;
                    self.notify(r);
                }
            }
        }
        for r in exec.runs.values().filter(|r| r.state == RunState::Pending) {
            self.backend.persist_run(r)?;
        }
        Ok(WorkflowReport {
            execution_id: record.execution_id,
            workflow_id: plan.workflow_id,
            plan_id: plan.plan_id,
            order: plan.order,
            runs: exec.runs,
        })
    }

    /// Expires stored Pending runs whose handshake deadline has passed.
    pub fn sweep_timeouts(&self) -> Result<Vec<String>, OrchestratorError> {
        let now = self.clock.now();
        let mut expired = Vec::new();
        for id in self.backend.run_ids() {
            let mut run = self.backend.load_run(&id)?;
            if run.expire_timeouts(now, run.pending_timeout()) {
                self.issuer.revoke_run(&id);
                self.backend.persist_run(&run)?;
                self.backend.record_provenance(&run)?;
                self.notify(&run);
                expired.push(id);
            }
        }
        Ok(expired)
    }
}

fn report(e: SessionError) -> ErrorReport {
    let reason = match &e {
        SessionError::Auth(_) => "auth",
        SessionError::Transport(TransportError::Closed) => "connection-lost",
        SessionError::Transport(TransportError::Timeout) => "timeout",
        SessionError::Transport(_) => "transport",
        _ => "protocol",
    };
    ErrorReport::new(reason, e.to_string())
}

fn runtime_available(runtime: &std::path::Path) -> bool {
    if runtime.components().count() > 1 {
        return runtime.is_file();
    }
    std::env::var_os("PATH").map(|p| std::env::split_paths(&p).any(|dir| dir.join(runtime).is_file())).unwrap_or(false)
}

/// Tool half of a simulated run.
fn simulated_tool<C: Connection>(
    conn: C,
    run_id: &str,
    token: &Token,
    key: &VersionKey,
    stub: &StubTool,
    store: &ArtifactStore,
    timeout: Duration,
) {
    let Ok(mut client) = ToolClient::connect(conn, run_id, token, key, Some(timeout)) else { return };
    let Ok(ToolRequest::Start { hyperparameters, inputs }) = client.next_request(Some(timeout)) else { return };
    let _ = client.status("RUNNING");
    let mut files = BTreeMap::new();
    for d in &inputs {
        let bytes = match &d.source {
            InputSource::InlinePayload { .. } => d.source.inline_bytes().expect("inline"),
            InputSource::UploadedFile { artifact } => store.get(artifact).map_err(|e| e.to_string()),
            InputSource::InContainerPath { path } => std::fs::read(path).map_err(|e| format!("{path}: {e}")),
            InputSource::DownloadRef { uri, .. } => {
                Err(format!("{uri}: downloads are not available to simulated tools"))
            }
        };
        match bytes {
            Ok(b) => {
                files.insert(d.port.clone(), b);
            }
            Err(e) => {
                let _ = client.error(&format!("input `{}`: {e}", d.port), "", json!({ "port": d.port }));
                return;
            }
        }
    }
    let _ = client.log("info", &format!("{key} received {} inputs", files.len()));
    match catch_unwind(AssertUnwindSafe(|| (stub.run)(&hyperparameters, &files))) {
        Ok(Ok(outputs)) => {
            let total: usize = outputs.values().map(Vec::len).sum();
            for (name, bytes) in &outputs {
                if client.output(name, bytes).is_err() {
                    return;
                }
            }
            let _ = client.metric("output_bytes", total as f64);
            let _ = client.finished();
        }
        Ok(Err(message)) => {
            let _ = client.error(&message, "", json!({ "tool": key.to_string() }));
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "tool panicked".into());
            let _ = client.error(&message, "panic", json!({ "tool": key.to_string() }));
        }
    }
}
