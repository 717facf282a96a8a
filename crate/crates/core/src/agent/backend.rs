//! Completion backends: who answers a (role, context) request.

use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::retrieve::tokens;
use super::{AgentKind, UNCERTAINTY_MARKER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Summarize,
    Plan,
    FetchData,
    AnalyzeData,
    FetchTools,
    ResearchPapers,
    WorkflowPlanner,
    HumanInTheLoop,
    Finalize,
    Judge,
}

impl Role {
    pub fn for_agent(kind: AgentKind) -> Role {
        match kind {
            AgentKind::Summarize => Role::Summarize,
            AgentKind::FetchData => Role::FetchData,
            AgentKind::AnalyzeData => Role::AnalyzeData,
            AgentKind::FetchTools => Role::FetchTools,
            AgentKind::ResearchPapers => Role::ResearchPapers,
            AgentKind::WorkflowPlanner => Role::WorkflowPlanner,
            AgentKind::HumanInTheLoop => Role::HumanInTheLoop,
            AgentKind::Finalize => Role::Finalize,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Summarize => "summarize",
            Role::Plan => "plan",
            Role::FetchData => "fetch_data",
            Role::AnalyzeData => "analyze_data",
            Role::FetchTools => "fetch_tools",
            Role::ResearchPapers => "research_papers",
            Role::WorkflowPlanner => "workflow_planner",
            Role::HumanInTheLoop => "human_in_the_loop",
            Role::Finalize => "finalize",
            Role::Judge => "judge",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("backend failure: {0}")]
pub struct BackendError(pub String);

impl From<String> for BackendError {
    fn from(s: String) -> Self {
        BackendError(s)
    }
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, role: Role, context: &str) -> Result<String, BackendError>;
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for &B {
    fn complete(&self, role: Role, context: &str) -> Result<String, BackendError> {
        (**self).complete(role, context)
    }
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for Box<B> {
    fn complete(&self, role: Role, context: &str) -> Result<String, BackendError> {
        (**self).complete(role, context)
    }
}

/// One table entry. `when` is a substring the context must contain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respond: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    /// Answer unmatched requests with the built-in heuristics instead of
    /// failing.
    #[serde(default = "yes")]
    pub heuristic_fallback: bool,
}

fn yes() -> bool {
    true
}

/// Deterministic backend: the first matching rule answers, then the
/// heuristics if enabled. The response depends only on role and context.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    script: Script,
}

impl ScriptedBackend {
    pub fn heuristic() -> Self {
        ScriptedBackend { script: Script { rules: Vec::new(), heuristic_fallback: true } }
    }

    pub fn new(script: Script) -> Result<Self, String> {
        for (i, r) in script.rules.iter().enumerate() {
            if r.respond.is_some() == r.fail.is_some() {
                return Err(format!("rule {i}: exactly one of `respond` and `fail` is required"));
            }
        }
        Ok(ScriptedBackend { script })
    }

    pub fn from_rules(rules: Vec<ScriptRule>, heuristic_fallback: bool) -> Result<Self, String> {
        Self::new(Script { rules, heuristic_fallback })
    }

    pub fn from_yaml(text: &str) -> Result<Self, String> {
        if text.trim().is_empty() {
            return Ok(Self::heuristic());
        }
        Self::new(serde_yaml::from_str(text).map_err(|e| e.to_string())?)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_yaml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

impl CompletionBackend for ScriptedBackend {
    fn complete(&self, role: Role, context: &str) -> Result<String, BackendError> {
        let hit =
            self.script.rules.iter().find(|r| r.role == role && r.when.as_deref().is_none_or(|w| context.contains(w)));
        match hit {
            Some(ScriptRule { respond: Some(s), .. }) => Ok(s.clone()),
            Some(ScriptRule { fail: Some(m), .. }) => Err(BackendError(m.clone())),
            Some(_) => unreachable!("validated at construction"),
            None if self.script.heuristic_fallback => Ok(heuristic(role, context)),
            None => Err(BackendError(format!("no scripted response for role {role}"))),
        }
    }
}

fn field<'a>(ctx: &'a Value, key: &str) -> &'a str {
    ctx.get(key).and_then(Value::as_str).unwrap_or("")
}

/// Built-in deterministic responses, keyed on the documented context
/// fields.
pub fn heuristic(role: Role, context: &str) -> String {
    let ctx: Value = serde_json::from_str(context).unwrap_or(Value::Null);
    let prompt = field(&ctx, "prompt");
    match role {
        Role::Summarize => {
            let files: Vec<&str> =
                ctx["files"].as_array().into_iter().flatten().filter_map(|f| f["name"].as_str()).collect();
            let mut s = format!("Request: {}", prompt.trim());
            if !files.is_empty() {
                s.push_str(&format!("\nFiles: {}", files.join(", ")));
            }
            s
        }
        Role::Plan => {
            let has_files = ctx["files"].as_array().is_some_and(|f| !f.is_empty());
            json!({ "plan": heuristic_plan(prompt, has_files) }).to_string()
        }
        Role::HumanInTheLoop => clarification_question(prompt),
        Role::FetchData => {
            let n = ctx["tool_result"].as_array().map_or(0, Vec::len);
            format!("Loaded {n} file(s).")
        }
        Role::AnalyzeData => {
            let lines: Vec<String> = ctx["tool_result"].as_array().into_iter().flatten().map(profile_line).collect();
            lines.join("\n")
        }
        Role::FetchTools => {
            let names: Vec<String> = ctx["tool_result"]
                .as_array()
                .into_iter()
                .flatten()
                .filter_map(|t| Some(format!("{} ({})", t["title"].as_str()?, t["tool_id"].as_str()?)))
                .collect();
            if names.is_empty() {
                "No registered tool matches the request.".into()
            } else {
                format!("Candidate tools: {}.", names.join(", "))
            }
        }
        Role::ResearchPapers => "No literature source is configured; the answer rests on file evidence only.".into(),
        Role::WorkflowPlanner => {
            "A workflow would start from the profiled file and chain preprocessing before analysis.".into()
        }
        Role::Finalize => heuristic_answer(prompt, &ctx["plan_state"]),
        Role::Judge => {
            json!({ "score": heuristic_judge(field(&ctx, "answer"), field(&ctx, "expected_answer")) }).to_string()
        }
    }
}

fn heuristic_plan(prompt: &str, has_files: bool) -> Vec<AgentKind> {
    let p = prompt.to_lowercase();
    let any = |ws: &[&str]| ws.iter().any(|w| p.contains(w));
    let mut plan = Vec::new();
    if has_files || p.contains(".csv") {
        plan.extend([AgentKind::FetchData, AgentKind::AnalyzeData]);
    }
    if any(&["ask me", "ask whether", "ask if", "clarification", "wait for my answer"]) {
        plan.push(AgentKind::HumanInTheLoop);
    }
    if any(&["literature", "publication", "paper", "research"]) {
        plan.push(AgentKind::ResearchPapers);
    }
    if any(&[" tool", " app", "catalog"]) {
        plan.push(AgentKind::FetchTools);
    }
    if any(&["build a workflow", "design a workflow", "plan a workflow", "chain "]) {
        plan.push(AgentKind::WorkflowPlanner);
    }
    plan.push(AgentKind::Finalize);
    plan
}

fn clarification_question(prompt: &str) -> String {
    let lower = prompt.to_lowercase();
    for key in ["ask me whether ", "ask whether ", "ask me if ", "ask if "] {
        if let Some(i) = lower.find(key) {
            let rest = &prompt[i + key.len()..];
            let end = rest.find(['.', '?', '!', ';']).unwrap_or(rest.len());
            let rest = rest[..end].trim().trim_end_matches(", and do not choose yet").trim_end_matches(',');
            return format!("Before I continue: {rest}?");
        }
    }
    "Before I continue: which goal should the recommendation prioritise?".into()
}

fn profile_line(p: &Value) -> String {
    let name = p["name"].as_str().unwrap_or("?");
    let rows = p["rows"].as_u64().unwrap_or(0);
    let cols = p["columns"].as_array().map_or(0, Vec::len);
    let numeric = p["columns"].as_array().into_iter().flatten().filter(|c| c["numeric"] == true).count();
    let missing: u64 = p["columns"].as_array().into_iter().flatten().filter_map(|c| c["missing"].as_u64()).sum();
    format!(
        "{name}: {rows} rows, {cols} columns ({numeric} numeric, {} categorical), {missing} missing values.",
        cols - numeric
    )
}

fn heuristic_answer(prompt: &str, state: &Value) -> String {
    let mut lines = Vec::new();
    let mut top_tool = None;
    let mut first_file = None;
    for step in state["steps"].as_array().into_iter().flatten() {
        let result = &step["output"]["tool_result"];
        match step["kind"].as_str() {
            Some("ANALYZE_DATA") => {
                for p in result.as_array().into_iter().flatten() {
                    first_file = first_file.or_else(|| p["name"].as_str().map(str::to_string));
                    lines.push(profile_line(p));
                }
            }
            Some("FETCH_TOOLS") => {
                let names: Vec<String> = result
                    .as_array()
                    .into_iter()
                    .flatten()
                    .filter_map(|t| t["title"].as_str().map(str::to_string))
                    .collect();
                top_tool = top_tool.or_else(|| names.first().cloned());
                if !names.is_empty() {
                    lines.push(format!("Candidate tools: {}.", names.join(", ")));
                }
            }
            Some("HUMAN_IN_THE_LOOP") => {
                if let Some(a) = step["output"]["answer"].as_str() {
                    lines.push(format!("Your clarification: {a}"));
                }
            }
            _ => {}
        }
    }
    let next = match (top_tool, first_file) {
        (Some(t), Some(f)) => format!("Suggested next step: inspect {t} for {f}; nothing has been executed."),
        (Some(t), None) => format!("Suggested next step: inspect {t}; nothing has been executed."),
        (None, Some(f)) => format!("Suggested next step: review the profile of {f} before choosing a tool."),
        (None, None) => format!("Answer to: {}", prompt.trim()),
    };
    lines.push(next);
    lines.join("\n")
}

/// Share of the expected answer's content words found in the answer.
pub fn heuristic_judge(answer: &str, expected: &str) -> u8 {
    const SKIP: &[&str] = &["agent", "should", "then", "their", "them", "whether", "after", "before"];
    let have: std::collections::BTreeSet<String> = tokens(answer).into_iter().collect();
    let want: std::collections::BTreeSet<String> =
        tokens(expected).into_iter().filter(|t| t.len() >= 4 && !SKIP.contains(&t.as_str())).collect();
    if answer.trim().is_empty() {
        return 0;
    }
    let score =
        if want.is_empty() { 100.0 } else { 100.0 * want.intersection(&have).count() as f64 / want.len() as f64 };
    let score = score.round() as u8;
    if answer.contains(UNCERTAINTY_MARKER) {
        score.min(20)
    } else {
        score
    }
}

/// Remote model endpoint. Posts `{"role", "context", "model"}` as JSON and
/// reads `{"response"}` back.
pub struct ExternalBackend {
    endpoint: String,
    model: Option<String>,
    agent: ureq::Agent,
}

impl ExternalBackend {
    pub fn new(endpoint: &str, model: Option<&str>, timeout: Duration) -> Self {
        ExternalBackend {
            endpoint: endpoint.to_string(),
            model: model.map(str::to_string),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    /// Reads `POSY_AGENT_ENDPOINT` and the optional `POSY_AGENT_MODEL`.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var("POSY_AGENT_ENDPOINT").ok()?;
        let model = std::env::var("POSY_AGENT_MODEL").ok();
        Some(Self::new(&endpoint, model.as_deref(), Duration::from_secs(120)))
    }
}

impl CompletionBackend for ExternalBackend {
    fn complete(&self, role: Role, context: &str) -> Result<String, BackendError> {
        let body = json!({ "role": role, "context": context, "model": self.model });
        let resp = self.agent.post(&self.endpoint).send_json(body).map_err(|e| match e {
            ureq::Error::Status(code, _) => BackendError(format!("endpoint returned HTTP {code}")),
            other => BackendError(other.to_string()),
        })?;
        let v: Value = resp.into_json().map_err(|e| BackendError(format!("unreadable reply: {e}")))?;
        v.get("response")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError("reply has no `response` string".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invocation {
    pub role: Role,
    pub context: String,
    pub response: Result<String, String>,
}

/// Wraps a backend and keeps every request and reply.
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Vec<Invocation>>,
}

impl<B: CompletionBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend { inner, log: Mutex::default() }
    }

    pub fn invocations(&self) -> Vec<Invocation> {
        self.log.lock().unwrap().clone()
    }

    pub fn roles(&self) -> Vec<Role> {
        self.log.lock().unwrap().iter().map(|i| i.role).collect()
    }
}

impl<B: CompletionBackend> CompletionBackend for RecordingBackend<B> {
    fn complete(&self, role: Role, context: &str) -> Result<String, BackendError> {
        let r = self.inner.complete(role, context);
        self.log.lock().unwrap().push(Invocation {
            role,
            context: context.to_string(),
            response: r.clone().map_err(|e| e.0),
        });
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};

    #[test]
    fn rules_then_fallback() {
        let b = ScriptedBackend::from_yaml(
            "rules:\n  - role: plan\n    when: iris\n    respond: '{\"plan\": [\"FINALIZE\"]}'\n  - role: plan\n    fail: offline\nheuristic_fallback: false\n",
        )
        .unwrap();
        assert_eq!(b.complete(Role::Plan, "about iris").unwrap(), "{\"plan\": [\"FINALIZE\"]}");
        assert_eq!(b.complete(Role::Plan, "other"), Err(BackendError("offline".into())));
        assert!(b.complete(Role::Judge, "x").is_err());
        assert!(ScriptedBackend::from_yaml("rules:\n  - role: plan\n").is_err());
        assert!(ScriptedBackend::from_yaml("rules:\n  - role: nope\n    respond: x\n").is_err());
    }

    #[test]
    fn heuristic_is_pure() {
        let ctx = json!({"prompt": "I uploaded iris.csv. Before recommending any app path, ask me whether I care more about explanation or subgroup discovery, and do not choose yet.", "files": [{"name": "iris.csv", "bytes": 10}]}).to_string();
        let b = ScriptedBackend::heuristic();
        let plan = b.complete(Role::Plan, &ctx).unwrap();
        assert_eq!(plan, b.complete(Role::Plan, &ctx).unwrap());
        let v: Value = serde_json::from_str(&plan).unwrap();
        assert_eq!(v["plan"], json!(["FETCH_DATA", "ANALYZE_DATA", "HUMAN_IN_THE_LOOP", "FETCH_TOOLS", "FINALIZE"]));
        assert_eq!(
            b.complete(Role::HumanInTheLoop, &ctx).unwrap(),
            "Before I continue: I care more about explanation or subgroup discovery?"
        );
    }

    #[test]
    fn judge_heuristic() {
        assert_eq!(heuristic_judge("", "anything"), 0);
        assert_eq!(heuristic_judge("balanced classes", "balanced classes"), 100);
        assert_eq!(heuristic_judge(&format!("{UNCERTAINTY_MARKER} balanced classes"), "balanced classes"), 20);
    }

    fn serve_once(status: &'static str, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}/complete", l.local_addr().unwrap());
        let h = std::thread::spawn(move || {
            let (mut s, _) = l.accept().unwrap();
            let mut r = BufReader::new(s.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                r.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut req = vec![0; len];
            r.read_exact(&mut req).unwrap();
            write!(s, "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
            String::from_utf8(req).unwrap()
        });
        (addr, h)
    }

    #[test]
    fn external_backend_round_trip() {
        let (addr, h) = serve_once("200 OK", "{\"response\": \"hello\"}");
        let b = ExternalBackend::new(&addr, Some("m1"), Duration::from_secs(5));
        assert_eq!(b.complete(Role::Summarize, "ctx").unwrap(), "hello");
        let req: Value = serde_json::from_str(&h.join().unwrap()).unwrap();
        assert_eq!(req, json!({"role": "summarize", "context": "ctx", "model": "m1"}));

        let (addr, h) = serve_once("500 Internal Server Error", "{}");
        let b = ExternalBackend::new(&addr, None, Duration::from_secs(5));
        assert_eq!(b.complete(Role::Plan, "ctx"), Err(BackendError("endpoint returned HTTP 500".into())));
        h.join().unwrap();
    }
}
