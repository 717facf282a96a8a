//! Benchmark files and benchmark runs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_yaml::Value as Yaml;

use super::score::{aggregate, judge_answer, score_trace, ScoreInput, JUDGE_PASS};
use super::{
    check_finalize, parse_kinds, resolve_files, AgentError, AgentKind, CompletionBackend, Dialogue, DialogueFailure,
    HitlResponder, NoHitl, ScriptedHitl,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub question: String,
    pub topic: String,
    pub needed_tools: Vec<AgentKind>,
    pub expected_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hitl_answer: Option<String>,
    pub required_files: Vec<String>,
}

const REQUIRED: [&str; 5] = ["question", "topic", "needed_tools", "expected_answer", "required_files"];

fn canonical_key(k: &str) -> &str {
    match k {
        "neededTools" => "needed_tools",
        "expectedAnswer" => "expected_answer",
        "hitlAnswer" => "hitl_answer",
        "requiredFiles" => "required_files",
        other => other,
    }
}

fn text_list(v: &Yaml, what: &str) -> Result<Vec<String>, String> {
    match v {
        Yaml::String(s) => Ok(s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()),
        Yaml::Sequence(items) => items
            .iter()
            .map(|i| i.as_str().map(|s| s.trim().to_string()).ok_or_else(|| format!("{what} entries must be text")))
            .collect(),
        _ => Err(format!("{what} must be a list or a comma separated string")),
    }
}

fn text(v: &Yaml, what: &str) -> Result<String, String> {
    v.as_str().map(str::to_string).ok_or_else(|| format!("{what} must be text"))
}

fn item_from(map: &serde_yaml::Mapping) -> Result<BenchmarkItem, String> {
    let mut fields: BTreeMap<&str, &Yaml> = BTreeMap::new();
    for (k, v) in map {
        let k = k.as_str().ok_or("field names must be text")?;
        let k = canonical_key(k);
        if !REQUIRED.contains(&k) && k != "hitl_answer" {
            return Err(format!("unknown field `{k}`"));
        }
        fields.insert(k, v);
    }
    for r in REQUIRED {
        if !fields.contains_key(r) {
            return Err(format!("missing field `{r}`"));
        }
    }
    let needed_tools = parse_kinds(&text_list(fields["needed_tools"], "needed_tools")?.join(","))?;
    if needed_tools.is_empty() {
        return Err("needed_tools is empty".into());
    }
    check_finalize(&needed_tools)?;
    let hitl_answer = match fields.get("hitl_answer") {
        None | Some(Yaml::Null) => None,
        Some(v) => Some(text(v, "hitl_answer")?),
    };
    let wants_hitl = needed_tools.contains(&AgentKind::HumanInTheLoop);
    if wants_hitl != hitl_answer.is_some() {
        return Err(if wants_hitl {
            "HUMAN_IN_THE_LOOP is needed but hitl_answer is missing".into()
        } else {
            "hitl_answer given but HUMAN_IN_THE_LOOP is not needed".into()
        });
    }
    let question = text(fields["question"], "question")?;
    if question.trim().is_empty() {
        return Err("question is empty".into());
    }
    Ok(BenchmarkItem {
        question,
        topic: text(fields["topic"], "topic")?,
        needed_tools,
        expected_answer: text(fields["expected_answer"], "expected_answer")?,
        hitl_answer,
        required_files: text_list(fields["required_files"], "required_files")?,
    })
}

/// Parses a YAML list of benchmark items. An empty document is an empty
/// benchmark.
pub fn parse_benchmark(source: &str) -> Result<Vec<BenchmarkItem>, AgentError> {
    let doc: Yaml = serde_yaml::from_str(source).map_err(|e| AgentError::SchemaViolation(e.to_string()))?;
    let items = match doc {
        Yaml::Null => return Ok(Vec::new()),
        Yaml::Sequence(items) => items,
        _ => return Err(AgentError::SchemaViolation("benchmark must be a list of items".into())),
    };
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let map =
                item.as_mapping().ok_or_else(|| AgentError::SchemaViolation(format!("item {i}: not a mapping")))?;
            item_from(map).map_err(|e| AgentError::SchemaViolation(format!("item {i}: {e}")))
        })
        .collect()
}

pub fn load_benchmark(path: &Path) -> Result<Vec<BenchmarkItem>, AgentError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| AgentError::SchemaViolation(format!("{}: {e}", path.display())))?;
    parse_benchmark(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub question: String,
    pub topic: String,
    pub expected: Vec<AgentKind>,
    pub actual: Vec<AgentKind>,
    pub answer: String,
    pub judge: u8,
    pub answer_correct: bool,
    pub strict: f64,
    pub relaxed: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<DialogueFailure>,
}

impl ItemResult {
    pub fn score_input(&self) -> ScoreInput {
        ScoreInput { expected: self.expected.clone(), actual: self.actual.clone(), answer_correct: self.answer_correct }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub items: usize,
    /// Mean strict score times 100.
    pub strict: Option<f64>,
    pub relaxed: Option<f64>,
    /// Mean judge score.
    pub judge: Option<f64>,
}

impl Summary {
    fn of(items: &[&ItemResult]) -> Self {
        let strict: Vec<f64> = items.iter().map(|i| i.strict).collect();
        let relaxed: Vec<f64> = items.iter().map(|i| i.relaxed).collect();
        let judge: Vec<f64> = items.iter().map(|i| i.judge as f64 / 100.0).collect();
        Summary {
            items: items.len(),
            strict: aggregate(&strict),
            relaxed: aggregate(&relaxed),
            judge: aggregate(&judge),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub items: Vec<ItemResult>,
    pub summary: Summary,
    pub by_topic: BTreeMap<String, Summary>,
}

/// Runs every item through a dialogue, judges the answer and scores the
/// trace. Files are looked up in `files_dir`. Items with a `hitl_answer`
/// get it as their scripted reply unless `hitl` overrides.
pub fn run_benchmark(
    items: &[BenchmarkItem],
    files_dir: &Path,
    backend: &dyn CompletionBackend,
    hitl: Option<&dyn HitlResponder>,
) -> Result<BenchReport, AgentError> {
    let mut results = Vec::new();
    for item in items {
        let scripted = item.hitl_answer.as_deref().map(ScriptedHitl::fixed);
        let responder: &dyn HitlResponder = match (hitl, &scripted) {
            (Some(h), _) => h,
            (None, Some(s)) => s,
            (None, None) => &NoHitl,
        };
        let files = resolve_files(files_dir, &item.required_files);
        let outcome = Dialogue::new(backend, responder).run(&item.question, &files)?;
        let judge = judge_answer(&outcome.answer, &item.expected_answer, backend)?;
        let answer_correct = judge >= JUDGE_PASS;
        let actual = outcome.trace.kinds().to_vec();
        let s = score_trace(&item.needed_tools, &actual, answer_correct)?;
        results.push(ItemResult {
            question: item.question.clone(),
            topic: item.topic.clone(),
            expected: item.needed_tools.clone(),
            actual,
            answer: outcome.answer,
            judge,
            answer_correct,
            strict: s.strict,
            relaxed: s.relaxed,
            failure: outcome.failure,
        });
    }
    let all: Vec<&ItemResult> = results.iter().collect();
    let mut topics: BTreeMap<String, Vec<&ItemResult>> = BTreeMap::new();
    for r in &results {
        topics.entry(r.topic.clone()).or_default().push(r);
    }
    let by_topic = topics.into_iter().map(|(t, rs)| (t, Summary::of(&rs))).collect();
    let summary = Summary::of(&all);
    Ok(BenchReport { items: results, summary, by_topic })
}

/// Score inputs from a list, or from a bench report's `items`.
pub fn parse_score_inputs(source: &str) -> Result<Vec<ScoreInput>, AgentError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Doc {
        List(Vec<ScoreInput>),
        Report { items: Vec<ScoreInput> },
    }
    match serde_yaml::from_str::<Doc>(source) {
        Ok(Doc::List(v)) | Ok(Doc::Report { items: v }) => Ok(v),
        Err(e) => Err(AgentError::SchemaViolation(e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = "
- question: Is iris balanced?
  topic: readiness
  needed_tools: FETCH_DATA, ANALYZE_DATA, FINALIZE
  expected_answer: Balanced.
  required_files: [iris.csv]
";

    #[test]
    fn parses_and_rejects() {
        let items = parse_benchmark(ONE).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].needed_tools, [AgentKind::FetchData, AgentKind::AnalyzeData, AgentKind::Finalize]);
        assert_eq!(parse_benchmark("").unwrap(), []);
        assert_eq!(parse_benchmark("  \n").unwrap(), []);

        let hitl_without_tool = format!("{ONE}  hitl_answer: explanation\n");
        assert!(matches!(parse_benchmark(&hitl_without_tool), Err(AgentError::SchemaViolation(_))));
        let tool_without_hitl = ONE.replace("ANALYZE_DATA,", "ANALYZE_DATA, HUMAN_IN_THE_LOOP,");
        assert!(matches!(parse_benchmark(&tool_without_hitl), Err(AgentError::SchemaViolation(_))));
        let missing = ONE.replace("  topic: readiness\n", "");
        let err = parse_benchmark(&missing).unwrap_err();
        assert_eq!(err, AgentError::SchemaViolation("item 0: missing field `topic`".into()));
        assert!(parse_benchmark(&ONE.replace("FINALIZE", "FINALIZE, FETCH_TOOLS")).is_err());
    }

    #[test]
    fn camel_case_fields() {
        let src = "- question: q\n  topic: t\n  neededTools: [FETCH_DATA, HUMAN_IN_THE_LOOP, FINALIZE]\n  expectedAnswer: e\n  hitlAnswer: h\n  requiredFiles: a.csv, b.csv\n";
        let items = parse_benchmark(src).unwrap();
        assert_eq!(items[0].hitl_answer.as_deref(), Some("h"));
        assert_eq!(items[0].required_files, ["a.csv", "b.csv"]);
    }

    #[test]
    fn score_input_shapes() {
        let list = "- {expected: [FINALIZE], actual: [], answer_correct: false}\n";
        assert_eq!(parse_score_inputs(list).unwrap().len(), 1);
        let report = "{\"items\": [{\"expected\": [\"FINALIZE\"], \"actual\": [\"FINALIZE\"], \"answer_correct\": true, \"judge\": 90}]}";
        assert_eq!(parse_score_inputs(report).unwrap()[0].actual, [AgentKind::Finalize]);
    }
}
