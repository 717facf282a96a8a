//! C ABI over posy-core.
//!
//! Every fallible call returns a [`PosyStatus`]; on failure the message is
//! available from [`posy_last_error`] on the same thread. Strings handed out
//! through `out` parameters are owned by the caller and released with
//! [`posy_string_free`]. Engines are opaque handles released with
//! [`posy_engine_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use posy_core::agent::{parse_kinds, score_trace};
use posy_core::digest::Digest;
use posy_core::lifecycle::{next_state, EventKind, RunState};
use posy_core::orchestrator::{Backend, ExecutorKind, Orchestrator, StubCatalog};
use posy_core::protocol::{decode_envelope, encode_envelope};
use posy_core::registry::parse_tool_config;
use posy_core::workflow::{parse_workflow, validate_graph};
use serde_json::json;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosyStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Invalid = 4,
    NotFound = 5,
    IllegalTransition = 6,
    Internal = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosyRunState {
    Pending = 0,
    Initialized = 1,
    Started = 2,
    Running = 3,
    Finished = 4,
    Error = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosyEvent {
    HandshakeCompleted = 0,
    StartCommandAccepted = 1,
    FunctionInvoked = 2,
    CompletedOk = 3,
    Failed = 4,
    TimeoutExpired = 5,
    TerminationRequested = 6,
}

impl From<PosyRunState> for RunState {
    fn from(s: PosyRunState) -> Self {
        RunState::ALL[s as usize]
    }
}

impl From<RunState> for PosyRunState {
    fn from(s: RunState) -> Self {
        match s {
            RunState::Pending => PosyRunState::Pending,
            RunState::Initialized => PosyRunState::Initialized,
            RunState::Started => PosyRunState::Started,
            RunState::Running => PosyRunState::Running,
            RunState::Finished => PosyRunState::Finished,
            RunState::Error => PosyRunState::Error,
        }
    }
}

impl From<PosyEvent> for EventKind {
    fn from(e: PosyEvent) -> Self {
        EventKind::ALL[e as usize]
    }
}

/// Scores of one trace.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PosyTraceScores {
    pub strict: f64,
    pub relaxed: f64,
}

/// Workflow engine over one data root with the built-in simulated tools.
pub struct PosyEngine {
    orchestrator: Orchestrator,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(PosyStatus, String);

type FfiResult<T> = Result<T, Failure>;

fn fail<T>(status: PosyStatus, msg: impl std::fmt::Display) -> FfiResult<T> {
    Err(Failure(status, msg.to_string()))
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', "\\0")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, records its error message and turns panics into
/// [`PosyStatus::Panic`].
fn guard(f: impl FnOnce() -> FfiResult<()>) -> PosyStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PosyStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PosyStatus::Panic
        }
    }
}

unsafe fn arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(PosyStatus::NullArgument, format!("`{name}` is null"));
    }
    CStr::from_ptr(p).to_str().or_else(|_| fail(PosyStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> FfiResult<()> {
    if out.is_null() {
        return fail(PosyStatus::NullArgument, "output pointer is null");
    }
    let c = CString::new(s).or_else(|_| fail(PosyStatus::Internal, "output contains a nul byte"))?;
    *out = c.into_raw();
    Ok(())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn posy_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn posy_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn posy_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Looks up the lifecycle transition for `event` in `state`. Illegal
/// pairs, including any event in a terminal state, return
/// `IllegalTransition` and leave `out` untouched.
///
/// # Safety
/// `out` must be NULL or point to writable memory for one state.
#[no_mangle]
pub unsafe extern "C" fn posy_next_state(state: PosyRunState, event: PosyEvent, out: *mut PosyRunState) -> PosyStatus {
    guard(|| {
        if out.is_null() {
            return fail(PosyStatus::NullArgument, "`out` is null");
        }
        match next_state(state.into(), event.into()) {
            Some(s) => {
                *out = s.into();
                Ok(())
            }
            None => fail(PosyStatus::IllegalTransition, format!("{event:?} is not allowed in {state:?}")),
        }
    })
}

/// Decodes one wire frame and writes its canonical encoding.
///
/// # Safety
/// `frame` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn posy_envelope_normalize(frame: *const c_char, out: *mut *mut c_char) -> PosyStatus {
    guard(|| {
        let env = decode_envelope(arg(frame, "frame")?).or_else(|e| fail(PosyStatus::Parse, e))?;
        let line = encode_envelope(&env).or_else(|e| fail(PosyStatus::Invalid, e))?;
        put_string(out, line)
    })
}

/// Parses a tool configuration file's text and writes
/// `{"spec", "version", "spec_hash"}` as JSON. Tools compare `spec_hash`
/// with the registry's copy.
///
/// # Safety
/// `yaml` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn posy_tool_config_parse(yaml: *const c_char, out: *mut *mut c_char) -> PosyStatus {
    guard(|| {
        let (spec, version) = parse_tool_config(arg(yaml, "yaml")?).or_else(|e| fail(PosyStatus::Parse, e))?;
        let doc = json!({
            "spec_hash": Digest::of_json(&spec).to_hex(),
            "version": version.to_string(),
            "spec": spec,
        });
        put_string(out, doc.to_string())
    })
}

/// Strict and relaxed tool-calling scores. Lists are comma separated agent
/// kinds such as `FETCH_DATA, ANALYZE_DATA, FINALIZE`.
///
/// # Safety
/// `expected` and `actual` must be nul-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn posy_score_trace(
    expected: *const c_char,
    actual: *const c_char,
    answer_correct: bool,
    out: *mut PosyTraceScores,
) -> PosyStatus {
    guard(|| {
        let e = parse_kinds(arg(expected, "expected")?).or_else(|m| fail(PosyStatus::Parse, m))?;
        let a = parse_kinds(arg(actual, "actual")?).or_else(|m| fail(PosyStatus::Parse, m))?;
        if out.is_null() {
            return fail(PosyStatus::NullArgument, "`out` is null");
        }
        let s = score_trace(&e, &a, answer_correct).or_else(|m| fail(PosyStatus::Invalid, m))?;
        *out = PosyTraceScores { strict: s.strict, relaxed: s.relaxed };
        Ok(())
    })
}

/// Opens an engine. A NULL `data_dir` keeps everything in memory.
///
/// # Safety
/// `data_dir` must be NULL or a nul-terminated string; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn posy_engine_open(data_dir: *const c_char, out: *mut *mut PosyEngine) -> PosyStatus {
    guard(|| {
        if out.is_null() {
            return fail(PosyStatus::NullArgument, "`out` is null");
        }
        let backend = if data_dir.is_null() {
            Backend::in_memory()
        } else {
            Backend::open(Path::new(arg(data_dir, "data_dir")?)).or_else(|e| fail(PosyStatus::Internal, e))?
        };
        let stubs = StubCatalog::standard();
        stubs.install(&backend.registry).or_else(|e| fail(PosyStatus::Internal, e))?;
        let engine = PosyEngine { orchestrator: Orchestrator::new(Arc::new(backend), stubs) };
        *out = Box::into_raw(Box::new(engine));
        Ok(())
    })
}

/// # Safety
/// `engine` must be NULL or a handle from [`posy_engine_open`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn posy_engine_free(engine: *mut PosyEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

unsafe fn engine_ref<'a>(engine: *const PosyEngine) -> FfiResult<&'a PosyEngine> {
    engine.as_ref().map_or_else(|| fail(PosyStatus::NullArgument, "`engine` is null"), Ok)
}

/// Validates a workflow document and writes its execution plan as JSON.
/// An invalid workflow returns `Invalid` with the violations in the error
/// message.
///
/// # Safety
/// `engine` must be a live handle; `yaml` a nul-terminated string; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn posy_engine_validate_workflow(
    engine: *const PosyEngine,
    yaml: *const c_char,
    out: *mut *mut c_char,
) -> PosyStatus {
    guard(|| {
        let e = engine_ref(engine)?;
        let graph = parse_workflow(arg(yaml, "yaml")?).or_else(|m| fail(PosyStatus::Parse, m))?;
        match validate_graph(&graph, &e.orchestrator.backend().registry) {
            Ok(plan) => put_string(out, serde_json::to_string(&plan).expect("plan serializes")),
            Err(v) => fail(PosyStatus::Invalid, v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")),
        }
    })
}

/// Runs a workflow with the simulated executor and writes
/// `{"execution_id", "workflow_id", "order", "states", "runs"}`.
///
/// # Safety
/// As for [`posy_engine_validate_workflow`].
#[no_mangle]
pub unsafe extern "C" fn posy_engine_run_workflow(
    engine: *const PosyEngine,
    yaml: *const c_char,
    out: *mut *mut c_char,
) -> PosyStatus {
    guard(|| {
        let e = engine_ref(engine)?;
        let graph = parse_workflow(arg(yaml, "yaml")?).or_else(|m| fail(PosyStatus::Parse, m))?;
        let r =
            e.orchestrator.run_workflow(&graph, ExecutorKind::Simulated).or_else(|m| fail(PosyStatus::Invalid, m))?;
        let runs: std::collections::BTreeMap<_, _> =
            r.runs.iter().map(|(n, run)| (n.clone(), run.run_id.clone())).collect();
        let doc = json!({
            "execution_id": r.execution_id,
            "workflow_id": r.workflow_id,
            "order": r.order,
            "states": r.states(),
            "runs": runs,
        });
        put_string(out, doc.to_string())
    })
}

/// Writes the stored run record as JSON.
///
/// # Safety
/// `engine` must be a live handle; `run_id` a nul-terminated string; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn posy_engine_run_record(
    engine: *const PosyEngine,
    run_id: *const c_char,
    out: *mut *mut c_char,
) -> PosyStatus {
    guard(|| {
        let e = engine_ref(engine)?;
        let rec =
            e.orchestrator.backend().load_run(arg(run_id, "run_id")?).or_else(|m| fail(PosyStatus::NotFound, m))?;
        put_string(out, serde_json::to_string(&rec).expect("record serializes"))
    })
}
