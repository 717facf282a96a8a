//! Staged assistant dialogue (summarize, plan, agent steps, finalize) and
//! the tool-calling benchmark around it.

pub mod backend;
pub mod bench;
pub mod guard;
pub mod retrieve;
pub mod score;

use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use backend::{
    BackendError, CompletionBackend, ExternalBackend, Invocation, RecordingBackend, Role, Script, ScriptRule,
    ScriptedBackend,
};
pub use bench::{load_benchmark, parse_benchmark, run_benchmark, BenchReport, BenchmarkItem, ItemResult};
pub use guard::{sanitize_input, DenyList, DenyScreen, Flag, OutputGuardrail, PassThrough, Sanitized, Verdict};
pub use retrieve::{KeywordRetriever, RetrievedTool, ToolRetriever};
pub use score::{
    aggregate, judge_answer, score_inputs, score_trace, score_trace_relaxed, score_trace_strict, ScoreError,
    ScoreInput, ScoreMode, ScoreReport, TraceScores,
};

use crate::clock::{Clock, MonotonicClock, Timestamp};
use crate::digest::Digest;
use crate::orchestrator::StubCatalog;

/// Prefix of every answer that could not be completed.
pub const UNCERTAINTY_MARKER: &str = "[uncertain]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum AgentKind {
    Summarize,
    FetchData,
    AnalyzeData,
    FetchTools,
    ResearchPapers,
    WorkflowPlanner,
    HumanInTheLoop,
    Finalize,
}

impl AgentKind {
    pub const COUNT: usize = 8;

    pub const ALL: [AgentKind; 8] = [
        AgentKind::Summarize,
        AgentKind::FetchData,
        AgentKind::AnalyzeData,
        AgentKind::FetchTools,
        AgentKind::ResearchPapers,
        AgentKind::WorkflowPlanner,
        AgentKind::HumanInTheLoop,
        AgentKind::Finalize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Summarize => "SUMMARIZE",
            AgentKind::FetchData => "FETCH_DATA",
            AgentKind::AnalyzeData => "ANALYZE_DATA",
            AgentKind::FetchTools => "FETCH_TOOLS",
            AgentKind::ResearchPapers => "RESEARCH_PAPERS",
            AgentKind::WorkflowPlanner => "WORKFLOW_PLANNER",
            AgentKind::HumanInTheLoop => "HUMAN_IN_THE_LOOP",
            AgentKind::Finalize => "FINALIZE",
        }
    }
}

impl std::fmt::Display for AgentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AgentKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        AgentKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown agent kind `{s}`"))
    }
}

/// Parses `FETCH_DATA, ANALYZE_DATA, FINALIZE`.
pub fn parse_kinds(list: &str) -> Result<Vec<AgentKind>, String> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

fn check_finalize(kinds: &[AgentKind]) -> Result<(), String> {
    match kinds.iter().position(|k| *k == AgentKind::Finalize) {
        Some(i) if i + 1 != kinds.len() => Err("FINALIZE must be the last entry and appear once".into()),
        _ => Ok(()),
    }
}

/// Agent kinds in invocation order. FINALIZE appears at most once, last.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AgentKind>", into = "Vec<AgentKind>")]
pub struct ToolCallTrace(Vec<AgentKind>);

impl TryFrom<Vec<AgentKind>> for ToolCallTrace {
    type Error = String;
    fn try_from(v: Vec<AgentKind>) -> Result<Self, String> {
        check_finalize(&v)?;
        Ok(ToolCallTrace(v))
    }
}

impl From<ToolCallTrace> for Vec<AgentKind> {
    fn from(t: ToolCallTrace) -> Self {
        t.0
    }
}

impl ToolCallTrace {
    pub fn kinds(&self) -> &[AgentKind] {
        &self.0
    }

    /// The trace without SUMMARIZE, as compared against benchmark lists.
    pub fn scored(&self) -> Vec<AgentKind> {
        self.0.iter().copied().filter(|k| *k != AgentKind::Summarize).collect()
    }

    pub fn contains(&self, k: AgentKind) -> bool {
        self.0.contains(&k)
    }

    fn push(&mut self, k: AgentKind) {
        assert!(!self.contains(AgentKind::Finalize), "nothing may follow FINALIZE");
        self.0.push(k);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub kind: AgentKind,
    pub input_digest: Digest,
    pub output: Value,
    pub timestamp: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceKind {
    Finding,
    HitlAnswer,
    /// Excluded input and withheld output. Never shown to the backend.
    Audit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    /// Index of the step that produced it.
    pub step: usize,
    pub kind: EvidenceKind,
    pub content: String,
}

/// Append-only record of one dialogue.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanState {
    plan: Vec<AgentKind>,
    steps: Vec<PlanStep>,
    evidence: Vec<Evidence>,
}

impl PlanState {
    pub fn plan(&self) -> &[AgentKind] {
        &self.plan
    }

    pub fn steps(&self) -> &[PlanStep] {
        &self.steps
    }

    pub fn evidence(&self) -> &[Evidence] {
        &self.evidence
    }

    fn set_plan(&mut self, plan: Vec<AgentKind>) {
        assert!(self.plan.is_empty(), "one planning round per dialogue");
        self.plan = plan;
    }

    fn push_step(&mut self, kind: AgentKind, input: &str, output: Value, timestamp: Timestamp) -> usize {
        self.steps.push(PlanStep { kind, input_digest: Digest::of(input.as_bytes()), output, timestamp });
        self.steps.len() - 1
    }

    fn add_evidence(&mut self, step: usize, kind: EvidenceKind, content: impl Into<String>) {
        assert!(step < self.steps.len(), "evidence must cite an existing step");
        self.evidence.push(Evidence { step, kind, content: content.into() });
    }

    /// True if `earlier` is a prefix of this state.
    pub fn extends(&self, earlier: &PlanState) -> bool {
        (earlier.plan.is_empty() || earlier.plan == self.plan)
            && self.steps.starts_with(&earlier.steps)
            && self.evidence.starts_with(&earlier.evidence)
    }

    /// What downstream agents and FINALIZE may see: the plan, step outputs
    /// and every non-audit evidence entry.
    pub fn context_view(&self) -> Value {
        json!({
            "plan": self.plan,
            "steps": self.steps.iter().map(|s| json!({ "kind": s.kind, "output": s.output })).collect::<Vec<_>>(),
            "evidence": self.evidence.iter().filter(|e| e.kind != EvidenceKind::Audit).collect::<Vec<_>>(),
        })
    }
}

/// The complete FINALIZE request: the sanitized prompt and the PlanState view.
pub fn finalize_context(prompt: &str, state: &PlanState) -> String {
    json!({ "prompt": prompt, "plan_state": state.context_view() }).to_string()
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

/// Why a dialogue stopped before a regular answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "failure", rename_all = "snake_case")]
pub enum DialogueFailure {
    Backend { role: Role, message: String },
    MalformedPlan { reply: String },
    Unanswered { question: String },
}

impl std::fmt::Display for DialogueFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DialogueFailure::Backend { role, message } => write!(f, "the {role} stage failed ({message})"),
            DialogueFailure::MalformedPlan { reply } => write!(f, "the plan could not be read ({reply:?})"),
            DialogueFailure::Unanswered { question } => write!(f, "the clarification {question:?} was not answered"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueOutcome {
    pub answer: String,
    pub trace: ToolCallTrace,
    pub plan_state: PlanState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<DialogueFailure>,
}

/// Supplies the user's reply to a clarification question. Blocks until
/// one exists; `None` means none will come.
pub trait HitlResponder: Send + Sync {
    fn answer(&self, question: &str) -> Option<String>;
}

/// Never answers and never waits.
pub struct NoHitl;

impl HitlResponder for NoHitl {
    fn answer(&self, _: &str) -> Option<String> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitlRule {
    #[serde(default)]
    pub when: Option<String>,
    pub answer: String,
}

/// Predefined replies, picked by substring of the question.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ScriptedHitl {
    rules: Vec<HitlRule>,
}

impl ScriptedHitl {
    pub fn fixed(answer: &str) -> Self {
        ScriptedHitl { rules: vec![HitlRule { when: None, answer: answer.into() }] }
    }

    /// A plain string, or a list of `{when, answer}` entries.
    pub fn from_yaml(text: &str) -> Result<Self, String> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Doc {
            One(String),
            Many(Vec<HitlRule>),
        }
        match serde_yaml::from_str(text).map_err(|e| e.to_string())? {
            Doc::One(a) => Ok(Self::fixed(&a)),
            Doc::Many(rules) => Ok(ScriptedHitl { rules }),
        }
    }
}

impl HitlResponder for ScriptedHitl {
    fn answer(&self, question: &str) -> Option<String> {
        self.rules.iter().find(|r| r.when.as_deref().is_none_or(|w| question.contains(w))).map(|r| r.answer.clone())
    }
}

/// A responder fed from another thread. Questions go out on one channel,
/// answers come back on the other; dropping the answer sender ends the
/// wait with no answer.
pub struct ChannelHitl {
    questions: Mutex<Sender<String>>,
    answers: Mutex<Receiver<String>>,
}

pub fn channel_hitl() -> (ChannelHitl, Receiver<String>, Sender<String>) {
    let (qt, qr) = channel();
    let (at, ar) = channel();
    (ChannelHitl { questions: Mutex::new(qt), answers: Mutex::new(ar) }, qr, at)
}

impl HitlResponder for ChannelHitl {
    fn answer(&self, question: &str) -> Option<String> {
        let _ = self.questions.lock().unwrap().send(question.to_string());
        self.answers.lock().unwrap().recv().ok()
    }
}

/// Reads a plan reply: `{"plan": [...]}`, a JSON list, or comma or
/// newline separated names. SUMMARIZE is dropped, anything after the first
/// FINALIZE is cut, FINALIZE is appended when missing and only the first
/// HUMAN_IN_THE_LOOP is kept.
pub fn parse_plan(reply: &str) -> Result<Vec<AgentKind>, String> {
    let names: Vec<String> = match serde_json::from_str::<Value>(reply.trim()) {
        Ok(Value::Object(m)) => m
            .get("plan")
            .and_then(Value::as_array)
            .ok_or("plan object has no `plan` list")?
            .iter()
            .map(|v| v.as_str().map(str::to_string).ok_or("plan entries must be strings"))
            .collect::<Result<_, _>>()?,
        Ok(Value::Array(a)) => a
            .iter()
            .map(|v| v.as_str().map(str::to_string).ok_or("plan entries must be strings"))
            .collect::<Result<_, _>>()?,
        _ => reply
            .split([',', '\n'])
            .map(|s| s.trim().trim_start_matches(['-', '*']).trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
    };
    let mut plan = Vec::new();
    let mut hitl = false;
    for n in names {
        let k: AgentKind = n.parse()?;
        match k {
            AgentKind::Summarize => {}
            AgentKind::Finalize => break,
            AgentKind::HumanInTheLoop if hitl => {}
            AgentKind::HumanInTheLoop => {
                hitl = true;
                plan.push(k);
            }
            _ => plan.push(k),
        }
    }
    plan.push(AgentKind::Finalize);
    Ok(plan)
}

struct LoadedFile {
    name: String,
    bytes: Vec<u8>,
}

fn load_files(files: &[PathBuf]) -> Result<Vec<LoadedFile>, AgentError> {
    files
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(|_| AgentError::MissingFile(p.display().to_string()))?;
            let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok(LoadedFile { name, bytes })
        })
        .collect()
}

fn is_missing(v: &str) -> bool {
    matches!(v.trim(), "" | "?" | "NA" | "N/A" | "nan" | "NaN" | "null")
}

/// Row count and per-column summary of a CSV file.
fn profile(file: &LoadedFile) -> Value {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(file.bytes.as_slice());
    let headers: Vec<String> = match rdr.headers() {
        Ok(h) => h.iter().map(str::to_string).collect(),
        Err(e) => return json!({ "name": file.name, "error": e.to_string() }),
    };
    let mut cols: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    let mut rows = 0u64;
    for rec in rdr.records() {
        let Ok(rec) = rec else { return json!({ "name": file.name, "error": "unreadable row" }) };
        rows += 1;
        for (i, col) in cols.iter_mut().enumerate() {
            col.push(rec.get(i).unwrap_or("").to_string());
        }
    }
    let columns: Vec<Value> = headers
        .iter()
        .zip(&cols)
        .map(|(name, vals)| {
            let present: Vec<&str> = vals.iter().map(String::as_str).filter(|v| !is_missing(v)).collect();
            let nums: Vec<f64> = present.iter().filter_map(|v| v.trim().parse::<f64>().ok()).collect();
            let distinct: std::collections::BTreeSet<&str> = present.iter().copied().collect();
            let mut c = json!({
                "name": name,
                "missing": vals.len() - present.len(),
                "distinct": distinct.len(),
                "numeric": !present.is_empty() && nums.len() == present.len(),
            });
            if !present.is_empty() && nums.len() == present.len() {
                let min = nums.iter().copied().fold(f64::INFINITY, f64::min);
                let max = nums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mean = nums.iter().sum::<f64>() / nums.len() as f64;
                c["min"] = json!(min);
                c["max"] = json!(max);
                c["mean"] = json!((mean * 1e6).round() / 1e6);
            }
            c
        })
        .collect();
    json!({ "name": file.name, "rows": rows, "columns": columns })
}

/// A configured dialogue runner.
pub struct Dialogue<'a> {
    backend: &'a dyn CompletionBackend,
    hitl: &'a dyn HitlResponder,
    deny: DenyList,
    guardrail: Box<dyn OutputGuardrail + 'a>,
    retriever: Box<dyn ToolRetriever + 'a>,
    clock: Arc<dyn Clock>,
    observer: Option<PlanObserver<'a>>,
}

type PlanObserver<'a> = Box<dyn Fn(&PlanState) + Send + Sync + 'a>;

impl<'a> Dialogue<'a> {
    pub fn new(backend: &'a dyn CompletionBackend, hitl: &'a dyn HitlResponder) -> Self {
        let catalog = StubCatalog::standard();
        Dialogue {
            backend,
            hitl,
            deny: DenyList::default(),
            guardrail: Box::new(DenyScreen::default()),
            retriever: Box::new(KeywordRetriever::new(catalog.tools().map(|t| &t.spec))),
            clock: Arc::new(MonotonicClock::new()),
            observer: None,
        }
    }

    pub fn with_deny_list(mut self, deny: DenyList) -> Self {
        self.deny = deny;
        self
    }

    pub fn with_guardrail(mut self, g: impl OutputGuardrail + 'a) -> Self {
        self.guardrail = Box::new(g);
        self
    }

    pub fn with_retriever(mut self, r: impl ToolRetriever + 'a) -> Self {
        self.retriever = Box::new(r);
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    /// Called with the PlanState after every change.
    pub fn with_observer(mut self, f: impl Fn(&PlanState) + Send + Sync + 'a) -> Self {
        self.observer = Some(Box::new(f));
        self
    }

    fn notify(&self, s: &PlanState) {
        if let Some(o) = &self.observer {
            o(s);
        }
    }

    pub fn run(&self, prompt: &str, files: &[PathBuf]) -> Result<DialogueOutcome, AgentError> {
        let files = load_files(files)?;
        let sanitized = self.deny.sanitize(prompt);
        let prompt = sanitized.cleaned.as_str();
        let mut state = PlanState::default();
        let mut trace = ToolCallTrace::default();
        let fail = |trace, state, failure: DialogueFailure| {
            let answer = format!(
                "{UNCERTAINTY_MARKER} I could not complete this request: {failure}. No recommendation is given; the evidence gathered so far is in the plan state."
            );
            Ok(DialogueOutcome { answer, trace, plan_state: state, failure: Some(failure) })
        };

        // Summarize.
        let file_list: Vec<Value> = files.iter().map(|f| json!({ "name": f.name, "bytes": f.bytes.len() })).collect();
        let ctx = json!({ "prompt": prompt, "files": file_list }).to_string();
        trace.push(AgentKind::Summarize);
        let summary = match self.backend.complete(Role::Summarize, &ctx) {
            Ok(s) => s,
            Err(e) => return fail(trace, state, DialogueFailure::Backend { role: Role::Summarize, message: e.0 }),
        };
        let step = state.push_step(AgentKind::Summarize, &ctx, json!({ "summary": summary }), self.clock.now());
        for f in &sanitized.flags {
            state.add_evidence(step, EvidenceKind::Audit, format!("input excluded by {}: {}", f.pattern, f.excerpt));
        }
        self.notify(&state);

        // Plan.
        let names: Vec<&str> = files.iter().map(|f| f.name.as_str()).collect();
        let agents: Vec<AgentKind> = AgentKind::ALL[1..].to_vec();
        let ctx =
            json!({ "prompt": prompt, "summary": summary, "files": file_list, "file_names": names, "agents": agents })
                .to_string();
        let plan = match self.backend.complete(Role::Plan, &ctx) {
            Ok(reply) => match parse_plan(&reply) {
                Ok(p) => p,
                Err(_) => return fail(trace, state, DialogueFailure::MalformedPlan { reply }),
            },
            Err(e) => return fail(trace, state, DialogueFailure::Backend { role: Role::Plan, message: e.0 }),
        };
        state.set_plan(plan.clone());
        self.notify(&state);

        // Agent steps.
        for kind in plan.iter().copied().filter(|k| *k != AgentKind::Finalize) {
            trace.push(kind);
            let role = Role::for_agent(kind);
            if kind == AgentKind::HumanInTheLoop {
                let ctx =
                    json!({ "prompt": prompt, "summary": summary, "plan_state": state.context_view() }).to_string();
                let question = match self.backend.complete(role, &ctx) {
                    Ok(q) => q,
                    Err(e) => return fail(trace, state, DialogueFailure::Backend { role, message: e.0 }),
                };
                let Some(reply) = self.hitl.answer(&question) else {
                    return fail(trace, state, DialogueFailure::Unanswered { question });
                };
                let step =
                    state.push_step(kind, &ctx, json!({ "question": question, "answer": reply }), self.clock.now());
                state.add_evidence(step, EvidenceKind::HitlAnswer, reply);
                self.notify(&state);
                continue;
            }
            let tool_result = match kind {
                AgentKind::FetchData => Value::Array(
                    files
                        .iter()
                        .map(|f| {
                            let head = f.bytes.split(|b| *b == b'\n').next().unwrap_or(&[]);
                            json!({
                                "name": f.name,
                                "bytes": f.bytes.len(),
                                "sha256": Digest::of(&f.bytes).to_hex(),
                                "header": String::from_utf8_lossy(head).trim_end(),
                            })
                        })
                        .collect(),
                ),
                AgentKind::AnalyzeData => Value::Array(files.iter().map(profile).collect()),
                AgentKind::FetchTools => json!(self.retriever.retrieve(&format!("{prompt}\n{summary}"), 5)),
                _ => Value::Null,
            };
            let ctx = json!({
                "prompt": prompt,
                "summary": summary,
                "tool_result": tool_result,
                "plan_state": state.context_view(),
            })
            .to_string();
            let reply = match self.backend.complete(role, &ctx) {
                Ok(r) => r,
                Err(e) => return fail(trace, state, DialogueFailure::Backend { role, message: e.0 }),
            };
            let step =
                state.push_step(kind, &ctx, json!({ "tool_result": tool_result, "response": reply }), self.clock.now());
            state.add_evidence(step, EvidenceKind::Finding, reply);
            self.notify(&state);
        }

        // Finalize sees only the prompt and the PlanState.
        trace.push(AgentKind::Finalize);
        let ctx = finalize_context(prompt, &state);
        let mut answer = match self.backend.complete(Role::Finalize, &ctx) {
            Ok(a) => a,
            Err(e) => return fail(trace, state, DialogueFailure::Backend { role: Role::Finalize, message: e.0 }),
        };
        let step = state.push_step(AgentKind::Finalize, &ctx, json!({ "answer": answer }), self.clock.now());
        if let Verdict::Withheld { pattern } = self.guardrail.screen(&answer) {
            state.add_evidence(step, EvidenceKind::Audit, format!("answer withheld by {pattern}: {answer}"));
            answer = "The answer was withheld by the output guardrail.".into();
        }
        self.notify(&state);
        Ok(DialogueOutcome { answer, trace, plan_state: state, failure: None })
    }
}

/// Runs one dialogue with default screening and tool lookup.
pub fn run_dialogue(
    prompt: &str,
    files: &[PathBuf],
    backend: &dyn CompletionBackend,
    hitl: &dyn HitlResponder,
) -> Result<DialogueOutcome, AgentError> {
    Dialogue::new(backend, hitl).run(prompt, files)
}

/// Joins `names` onto `dir`.
pub fn resolve_files(dir: &Path, names: &[String]) -> Vec<PathBuf> {
    names.iter().map(|n| dir.join(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_round_trip() {
        for k in AgentKind::ALL {
            assert_eq!(k.as_str().parse::<AgentKind>(), Ok(k));
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
        }
        assert_eq!(parse_kinds("FETCH_DATA, ANALYZE_DATA, FINALIZE").unwrap().len(), 3);
        assert!(parse_kinds("FETCH_DATA, NOPE").is_err());
    }

    #[test]
    fn trace_rejects_misplaced_finalize() {
        use AgentKind::*;
        assert!(ToolCallTrace::try_from(vec![FetchData, Finalize]).is_ok());
        assert!(ToolCallTrace::try_from(vec![Finalize, FetchData]).is_err());
        assert!(ToolCallTrace::try_from(vec![Finalize, Finalize]).is_err());
        assert!(serde_json::from_str::<ToolCallTrace>("[\"FINALIZE\", \"FETCH_DATA\"]").is_err());
    }

    #[test]
    fn plan_parsing() {
        use AgentKind::*;
        assert_eq!(parse_plan("{\"plan\": [\"FETCH_DATA\", \"FINALIZE\"]}").unwrap(), [FetchData, Finalize]);
        assert_eq!(parse_plan("[\"SUMMARIZE\", \"FETCH_TOOLS\"]").unwrap(), [FetchTools, Finalize]);
        assert_eq!(parse_plan("- FETCH_DATA\n- FINALIZE\n- FETCH_TOOLS").unwrap(), [FetchData, Finalize]);
        assert_eq!(
            parse_plan("HUMAN_IN_THE_LOOP, HUMAN_IN_THE_LOOP, FETCH_TOOLS").unwrap(),
            [HumanInTheLoop, FetchTools, Finalize]
        );
        assert!(parse_plan("{\"steps\": []}").is_err());
        assert!(parse_plan("do something clever").is_err());
    }

    #[test]
    fn plan_state_append_only_view() {
        let mut s = PlanState::default();
        let before = s.clone();
        let i = s.push_step(AgentKind::Summarize, "ctx", json!({"summary": "x"}), Timestamp(1));
        s.add_evidence(i, EvidenceKind::Audit, "hidden");
        s.add_evidence(i, EvidenceKind::Finding, "shown");
        assert!(s.extends(&before));
        assert!(!before.extends(&s));
        let view = s.context_view();
        assert_eq!(view["evidence"].as_array().unwrap().len(), 1);
        assert!(!view.to_string().contains("hidden"));
    }

    #[test]
    fn csv_profile() {
        let f = LoadedFile { name: "t.csv".into(), bytes: b"a,b\n1,x\n?,y\n3,x\n".to_vec() };
        let p = profile(&f);
        assert_eq!(p["rows"], 3);
        assert_eq!(p["columns"][0]["missing"], 1);
        assert_eq!(p["columns"][0]["numeric"], true);
        assert_eq!(p["columns"][0]["mean"], 2.0);
        assert_eq!(p["columns"][1]["distinct"], 2);
        assert_eq!(p["columns"][1]["numeric"], false);
    }
}
