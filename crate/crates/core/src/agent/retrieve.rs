//! Keyword lookup over registered tool specs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::registry::ToolSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedTool {
    pub tool_id: String,
    pub title: String,
    pub score: f64,
}

pub trait ToolRetriever: Send + Sync {
    fn retrieve(&self, query: &str, limit: usize) -> Vec<RetrievedTool>;
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "can", "do", "for", "from", "i", "if", "in", "into", "is", "it",
    "me", "my", "of", "on", "or", "should", "so", "that", "the", "this", "to", "use", "using", "what", "which", "with",
    "would", "you",
];

/// Lowercase word stems. CamelCase is split and a plural `s` dropped.
pub fn tokens(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    let mut prev_lower = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if c.is_uppercase() && prev_lower && !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            prev_lower = c.is_lowercase();
            cur.extend(c.to_lowercase());
        } else {
            prev_lower = false;
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
        .into_iter()
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .map(|w| match w.strip_suffix('s') {
            Some(s) if s.len() > 3 && !s.ends_with('s') => s.to_string(),
            _ => w,
        })
        .collect()
}

struct Doc {
    tool_id: String,
    title: String,
    title_terms: BTreeSet<String>,
    body_terms: BTreeSet<String>,
}

/// Title matches weigh twice description matches; rarer terms weigh more.
pub struct KeywordRetriever {
    docs: Vec<Doc>,
    df: BTreeMap<String, usize>,
}

impl KeywordRetriever {
    pub fn new<'a>(specs: impl IntoIterator<Item = &'a ToolSpec>) -> Self {
        let mut docs = Vec::new();
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for s in specs {
            let mut title_terms: BTreeSet<String> = tokens(&s.title).into_iter().collect();
            title_terms.extend(tokens(s.tool_id.as_str()));
            let body_terms: BTreeSet<String> = tokens(&s.description).into_iter().collect();
            for t in title_terms.union(&body_terms) {
                *df.entry(t.clone()).or_default() += 1;
            }
            docs.push(Doc { tool_id: s.tool_id.to_string(), title: s.title.clone(), title_terms, body_terms });
        }
        KeywordRetriever { docs, df }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

impl ToolRetriever for KeywordRetriever {
    fn retrieve(&self, query: &str, limit: usize) -> Vec<RetrievedTool> {
        let q: BTreeSet<String> = tokens(query).into_iter().collect();
        let n = self.docs.len() as f64;
        let mut hits: Vec<RetrievedTool> = self
            .docs
            .iter()
            .filter_map(|d| {
                let score: f64 = q
                    .iter()
                    .map(|t| {
                        let idf = (1.0 + n / *self.df.get(t).unwrap_or(&1) as f64).ln();
                        let w = if d.title_terms.contains(t) {
                            2.0
                        } else if d.body_terms.contains(t) {
                            1.0
                        } else {
                            0.0
                        };
                        w * idf
                    })
                    .sum();
                (score > 0.0).then(|| RetrievedTool { tool_id: d.tool_id.clone(), title: d.title.clone(), score })
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tool_id.cmp(&b.tool_id)));
        hits.truncate(limit);
        hits
    }
}
