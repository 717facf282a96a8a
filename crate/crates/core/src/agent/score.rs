//! Tool-calling trace scores and the answer judge.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::backend::{CompletionBackend, Role};
use super::{AgentError, AgentKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ScoreError {
    #[error("expected tool list is empty")]
    EmptyExpected,
}

/// Judge scores at or above this count as a correct answer.
pub const JUDGE_PASS: u8 = 50;

pub const JUDGE_RUBRIC_VERSION: &str = "judge-rubric/1";

pub const JUDGE_RUBRIC: &str = "\
You grade an assistant answer against the intended benchmark outcome.
Score 0 to 100. 100 means the answer fully matches the intended outcome: it is complete,
comprehensible, grounded in the referenced files and adequate in context. 0 means it misses
the intended outcome or invents facts. Answers that state explicit uncertainty instead of
a conclusion score at most 20. Reply with a JSON object {\"score\": <integer>} and nothing else.";

#[inline]
fn scored(k: &AgentKind) -> bool {
    *k != AgentKind::Summarize
}

/// Length of the longest common subsequence of the scoreable kinds of `a`
/// and `b`, plus the scoreable length of `a`. SUMMARIZE is skipped on both
/// sides.
pub fn lcs_scored(a: &[AgentKind], b: &[AgentKind]) -> (usize, usize) {
    let mut masks = [0u64; AgentKind::COUNT];
    let mut n = 0usize;
    for k in a.iter().filter(|k| scored(k)) {
        if n == 64 {
            return lcs_dp(a, b);
        }
        masks[*k as usize] |= 1 << n;
        n += 1;
    }
    // Bit-parallel LCS: zero bits of `v` in the low `n` positions count
    // the common subsequence.
    let mut v = u64::MAX;
    for k in b.iter().filter(|k| scored(k)) {
        let u = v & masks[*k as usize];
        v = v.wrapping_add(u) | (v - u);
    }
    let low = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    ((!v & low).count_ones() as usize, n)
}

fn lcs_dp(a: &[AgentKind], b: &[AgentKind]) -> (usize, usize) {
    let a: Vec<AgentKind> = a.iter().copied().filter(scored).collect();
    let mut row = vec![0usize; a.len() + 1];
    for y in b.iter().filter(|k| scored(k)) {
        let mut diag = 0;
        for (i, x) in a.iter().enumerate() {
            let up = row[i + 1];
            row[i + 1] = if x == y { diag + 1 } else { up.max(row[i]) };
            diag = up;
        }
    }
    (row[a.len()], a.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceScores {
    pub strict: f64,
    pub relaxed: f64,
}

pub fn score_trace(
    expected: &[AgentKind],
    actual: &[AgentKind],
    answer_correct: bool,
) -> Result<TraceScores, ScoreError> {
    let (common, n) = lcs_scored(expected, actual);
    if n == 0 {
        return Err(ScoreError::EmptyExpected);
    }
    let strict = common as f64 / n as f64;
    let has = |s: &[AgentKind], k| s.contains(&k);
    let accepted = answer_correct
        && has(actual, AgentKind::Finalize)
        && (!has(expected, AgentKind::HumanInTheLoop) || has(actual, AgentKind::HumanInTheLoop));
    Ok(TraceScores { strict, relaxed: if accepted { 1.0 } else { strict } })
}

/// LCS over expected, divided by the expected length.
pub fn score_trace_strict(expected: &[AgentKind], actual: &[AgentKind]) -> Result<f64, ScoreError> {
    score_trace(expected, actual, false).map(|s| s.strict)
}

/// 1.0 for a correct answer that reached FINALIZE (and HUMAN_IN_THE_LOOP
/// when expected), otherwise the strict score.
pub fn score_trace_relaxed(
    expected: &[AgentKind],
    actual: &[AgentKind],
    answer_correct: bool,
) -> Result<f64, ScoreError> {
    score_trace(expected, actual, answer_correct).map(|s| s.relaxed)
}

/// Mean of per-item scores on the 0 to 100 scale.
pub fn aggregate(scores: &[f64]) -> Option<f64> {
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64 * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Strict,
    Relaxed,
}

impl std::str::FromStr for ScoreMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "strict" => Ok(ScoreMode::Strict),
            "relaxed" => Ok(ScoreMode::Relaxed),
            _ => Err(format!("unknown score mode `{s}`")),
        }
    }
}

/// One scoreable benchmark outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreInput {
    pub expected: Vec<AgentKind>,
    pub actual: Vec<AgentKind>,
    pub answer_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub mode: ScoreMode,
    pub scores: Vec<f64>,
    pub aggregate: Option<f64>,
}

pub fn score_inputs(inputs: &[ScoreInput], mode: ScoreMode) -> Result<ScoreReport, ScoreError> {
    let scores = inputs
        .iter()
        .map(|i| {
            let s = score_trace(&i.expected, &i.actual, i.answer_correct)?;
            Ok(match mode {
                ScoreMode::Strict => s.strict,
                ScoreMode::Relaxed => s.relaxed,
            })
        })
        .collect::<Result<Vec<f64>, ScoreError>>()?;
    let aggregate = aggregate(&scores);
    Ok(ScoreReport { mode, scores, aggregate })
}

/// The context document handed to the judge.
pub fn judge_context(answer: &str, expected_answer: &str) -> String {
    json!({
        "rubric_version": JUDGE_RUBRIC_VERSION,
        "rubric": JUDGE_RUBRIC,
        "expected_answer": expected_answer,
        "answer": answer,
    })
    .to_string()
}

/// Asks the backend to grade `answer`; returns 0 to 100.
pub fn judge_answer(answer: &str, expected_answer: &str, backend: &dyn CompletionBackend) -> Result<u8, AgentError> {
    let reply = backend.complete(Role::Judge, &judge_context(answer, expected_answer))?;
    parse_judge_score(&reply).ok_or_else(|| AgentError::Backend(format!("unusable judge reply: {reply:?}").into()))
}

fn parse_judge_score(reply: &str) -> Option<u8> {
    let v: serde_json::Value = serde_json::from_str(reply.trim()).ok()?;
    let n = match &v {
        serde_json::Value::Object(m) => m.get("score")?.as_f64()?,
        other => other.as_f64()?,
    };
    (0.0..=100.0).contains(&n).then(|| n.round() as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use AgentKind::*;

    #[test]
    fn examples() {
        let full = [FetchData, AnalyzeData, Finalize];
        assert_eq!(score_trace_strict(&full, &full), Ok(1.0));
        assert_eq!(
            score_trace_strict(&[FetchData, AnalyzeData, FetchTools, Finalize], &[FetchData, Finalize]),
            Ok(0.5)
        );
        assert_eq!(score_trace_strict(&full, &[]), Ok(0.0));
        assert_eq!(score_trace_strict(&[], &full), Err(ScoreError::EmptyExpected));
        assert_eq!(score_trace_strict(&[Summarize], &full), Err(ScoreError::EmptyExpected));

        let expected = [FetchData, AnalyzeData, FetchTools, Finalize];
        let short = [FetchData, AnalyzeData, Finalize];
        assert_eq!(score_trace_relaxed(&expected, &short, true), Ok(1.0));
        assert_eq!(score_trace_relaxed(&expected, &short, false), Ok(0.75));
        let hitl = [FetchData, AnalyzeData, HumanInTheLoop, FetchTools, Finalize];
        assert_eq!(score_trace_relaxed(&hitl, &short, true), Ok(0.6));
    }

    #[test]
    fn summarize_is_not_scored() {
        let e = [FetchData, Finalize];
        assert_eq!(score_trace_strict(&e, &[Summarize, FetchData, Finalize]), Ok(1.0));
        assert_eq!(score_trace_strict(&[Summarize, FetchData, Finalize], &[FetchData]), Ok(0.5));
    }

    #[test]
    fn long_sequences_use_dp() {
        let a: Vec<AgentKind> = (0..100).map(|i| AgentKind::ALL[1 + i % 7]).collect();
        let b: Vec<AgentKind> = a.iter().rev().copied().collect();
        assert_eq!(lcs_scored(&a, &a), (100, 100));
        let (l, n) = lcs_scored(&a, &b);
        assert_eq!(n, 100);
        assert_eq!(l, lcs_dp(&a, &b).0);
        let a64: Vec<AgentKind> = a[..64].to_vec();
        assert_eq!(lcs_scored(&a64, &b), lcs_dp(&a64, &b));
    }

    #[test]
    fn judge_reply_parsing() {
        assert_eq!(parse_judge_score("{\"score\": 87}"), Some(87));
        assert_eq!(parse_judge_score(" 100 "), Some(100));
        assert_eq!(parse_judge_score("101"), None);
        assert_eq!(parse_judge_score("great"), None);
    }

    #[test]
    fn aggregation() {
        assert_eq!(aggregate(&[]), None);
        assert_eq!(aggregate(&[1.0, 0.5]), Some(75.0));
    }
}
