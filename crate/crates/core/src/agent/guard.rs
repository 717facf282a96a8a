//! Prompt-injection screening on the way in, answer screening on the way out.

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Instruction-override phrasings. Matching is per sentence or line.
pub const DEFAULT_DENY_PATTERNS: &[&str] = &[
    r"(?i)\b(ignore|disregard|forget|skip)\s+(all\s+|any\s+|the\s+)?(previous|prior|above|earlier|preceding|system)\s+(instructions?|prompts?|messages?|rules|guidelines|context)",
    r"(?i)\bforget\s+(everything|all)\s+(you|that|above)\b",
    r"(?i)\byou\s+are\s+now\s+(a|an|in|no\s+longer)\b",
    r"(?i)\b(reveal|print|show|repeat|output|leak)\s+(me\s+)?(your|the)\s+(system\s+prompt|hidden\s+instructions|instructions|secret)",
    r"(?i)\b(developer|god|jailbreak|dan|unrestricted)\s+mode\b",
    r"(?i)\boverride\s+(your|the|all)\s+(instructions|rules|safety|guardrails|policy|policies)",
    r"(?i)\bpretend\s+(that\s+)?(you\s+)?(have\s+no|are\s+not\s+bound\s+by)\b",
    r"(?im)^\s*(system|assistant)\s*:",
];

/// Credentials and secrets that must not leave in an answer.
pub const DEFAULT_OUTPUT_PATTERNS: &[&str] = &[
    r"-----BEGIN [A-Z ]*PRIVATE KEY-----",
    r"(?i)\b(api[_-]?key|secret|password|passwd|bearer)\b\s*[:=]\s*\S{8,}",
    r"POSY_SHARED_SECRET\s*=",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flag {
    pub pattern: String,
    /// The excluded segment, kept verbatim for audit.
    pub excerpt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sanitized {
    pub cleaned: String,
    pub flags: Vec<Flag>,
}

#[derive(Debug, Clone)]
pub struct DenyList {
    patterns: Vec<Regex>,
}

impl Default for DenyList {
    fn default() -> Self {
        DenyList::new(DEFAULT_DENY_PATTERNS).expect("built-in patterns compile")
    }
}

impl DenyList {
    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self, regex::Error> {
        Ok(DenyList { patterns: patterns.iter().map(|p| Regex::new(p.as_ref())).collect::<Result<_, _>>()? })
    }

    pub fn first_match(&self, text: &str) -> Option<&str> {
        self.patterns.iter().find(|r| r.is_match(text)).map(|r| r.as_str())
    }

    /// Drops every flagged segment. A prompt without flags comes back
    /// unchanged.
    pub fn sanitize(&self, prompt: &str) -> Sanitized {
        let mut cleaned = String::new();
        let mut flags = Vec::new();
        for seg in segments(prompt) {
            match self.first_match(seg) {
                Some(p) => flags.push(Flag { pattern: p.to_string(), excerpt: seg.trim().to_string() }),
                None => cleaned.push_str(seg),
            }
        }
        if flags.is_empty() {
            return Sanitized { cleaned: prompt.to_string(), flags };
        }
        Sanitized { cleaned: cleaned.trim().to_string(), flags }
    }
}

pub fn sanitize_input(prompt: &str) -> Sanitized {
    DenyList::default().sanitize(prompt)
}

/// Sentences and lines, each keeping its trailing whitespace.
fn segments(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let end = match c {
            '\n' => Some(i + 1),
            '.' | '!' | '?' => match chars.peek() {
                Some((_, n)) if n.is_whitespace() => {
                    let mut j = i + 1;
                    while let Some((k, n)) = chars.peek().copied() {
                        if n == '\n' || !n.is_whitespace() {
                            break;
                        }
                        j = k + n.len_utf8();
                        chars.next();
                    }
                    Some(j)
                }
                _ => None,
            },
            _ => None,
        };
        if let Some(e) = end {
            out.push(&text[start..e]);
            start = e;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Withheld { pattern: String },
}

/// Runs after FINALIZE on the answer text.
pub trait OutputGuardrail: Send + Sync {
    fn screen(&self, answer: &str) -> Verdict;
}

pub struct PassThrough;

impl OutputGuardrail for PassThrough {
    fn screen(&self, _: &str) -> Verdict {
        Verdict::Pass
    }
}

pub struct DenyScreen(pub DenyList);

impl Default for DenyScreen {
    fn default() -> Self {
        DenyScreen(DenyList::new(DEFAULT_OUTPUT_PATTERNS).expect("built-in patterns compile"))
    }
}

impl OutputGuardrail for DenyScreen {
    fn screen(&self, answer: &str) -> Verdict {
        match self.0.first_match(answer) {
            Some(p) => Verdict::Withheld { pattern: p.to_string() },
            None => Verdict::Pass,
        }
    }
}
