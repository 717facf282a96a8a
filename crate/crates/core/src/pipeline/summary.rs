use std::fmt;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;

/// The nine release stages, in their fixed execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    FetchConfig,
    FetchRepository,
    FetchFiles,
    BuildImage,
    Test,
    VulnerabilityScan,
    MalwareScan,
    PushImage,
    PushSummary,
}

impl Stage {
    pub const ORDER: [Stage; 9] = [
        Stage::FetchConfig,
        Stage::FetchRepository,
        Stage::FetchFiles,
        Stage::BuildImage,
        Stage::Test,
        Stage::VulnerabilityScan,
        Stage::MalwareScan,
        Stage::PushImage,
        Stage::PushSummary,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::FetchConfig => "FetchConfig",
            Stage::FetchRepository => "FetchRepository",
            Stage::FetchFiles => "FetchFiles",
            Stage::BuildImage => "BuildImage",
            Stage::Test => "Test",
            Stage::VulnerabilityScan => "VulnerabilityScan",
            Stage::MalwareScan => "MalwareScan",
            Stage::PushImage => "PushImage",
            Stage::PushSummary => "PushSummary",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StageStatus {
    Success,
    Failure(String),
}

impl StageStatus {
    pub fn is_success(&self) -> bool {
        matches!(self, StageStatus::Success)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Severity {
    Unknown,
    Low,
    Medium,
    High,
    Critical,
}

impl Severity {
    /// Only HIGH and CRITICAL findings are retained in scan reports.
    pub fn is_reportable(self) -> bool {
        matches!(self, Severity::High | Severity::Critical)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnerabilityFinding {
    pub id: String,
    pub severity: Severity,
    #[serde(default)]
    pub package: String,
}

/// Outcome of one executed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: Stage,
    pub status: StageStatus,
    pub log: String,
    pub report: Option<serde_json::Value>,
}

impl StageResult {
    pub fn success(stage: Stage, log: impl Into<String>) -> Self {
        StageResult { stage, status: StageStatus::Success, log: log.into(), report: None }
    }

    pub fn failure(stage: Stage, reason: impl Into<String>, log: impl Into<String>) -> Self {
        StageResult { stage, status: StageStatus::Failure(reason.into()), log: log.into(), report: None }
    }

    pub fn with_report(mut self, report: serde_json::Value) -> Self {
        self.report = Some(report);
        self
    }

    /// Findings of a VulnerabilityScan report; empty for other stages.
    pub fn vulnerability_findings(&self) -> Vec<VulnerabilityFinding> {
        if self.stage != Stage::VulnerabilityScan {
            return Vec::new();
        }
        self.report
            .as_ref()
            .and_then(|r| r.get("findings"))
            .and_then(|f| serde_json::from_value(f.clone()).ok())
            .unwrap_or_default()
    }

    /// Malware findings recorded by a MalwareScan report.
    pub fn malware_findings(&self) -> Vec<String> {
        if self.stage != Stage::MalwareScan {
            return Vec::new();
        }
        self.report
            .as_ref()
            .and_then(|r| r.get("findings"))
            .and_then(|f| serde_json::from_value(f.clone()).ok())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnerabilityCounts {
    pub high: u64,
    pub critical: u64,
}

/// `"clean"` or the list of findings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MalwareRepr", into = "MalwareRepr")]
pub enum MalwareResult {
    Clean,
    Findings(Vec<String>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MalwareRepr {
    Word(String),
    Findings(Vec<String>),
}

impl TryFrom<MalwareRepr> for MalwareResult {
    type Error = String;
    fn try_from(r: MalwareRepr) -> Result<Self, Self::Error> {
        match r {
            MalwareRepr::Word(w) if w == "clean" => Ok(MalwareResult::Clean),
            MalwareRepr::Word(w) => Err(format!("malware result must be \"clean\" or a list, got {w:?}")),
            MalwareRepr::Findings(f) => Ok(MalwareResult::Findings(f)),
        }
    }
}

impl From<MalwareResult> for MalwareRepr {
    fn from(m: MalwareResult) -> Self {
        match m {
            MalwareResult::Clean => MalwareRepr::Word("clean".into()),
            MalwareResult::Findings(f) => MalwareRepr::Findings(f),
        }
    }
}

/// Serialized stage entry of a release summary. The stage log itself is
/// referenced by digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: Stage,
    #[serde(flatten)]
    pub status: StageStatus,
    pub log_ref: Digest,
}

/// Traceable record binding a published image to its source revision and
/// gate outcomes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseSummary {
    pub image_name: String,
    pub commit_hash: String,
    pub file_links: Vec<String>,
    pub vulnerabilities: VulnerabilityCounts,
    pub malware: MalwareResult,
    pub stages: Vec<StageRecord>,
}

impl ReleaseSummary {
    /// Succeeds only if all nine stages are present in order and succeeded.
    /// On failure returns the offending stage name and a reason.
    pub fn check_gates(&self) -> Result<(), (String, String)> {
        for (i, expected) in Stage::ORDER.iter().enumerate() {
            let Some(rec) = self.stages.get(i) else {
                return Err((expected.to_string(), "stage missing from summary".into()));
            };
            if rec.name != *expected {
                return Err((expected.to_string(), format!("out of order: found {}", rec.name)));
            }
            if let StageStatus::Failure(reason) = &rec.status {
                return Err((rec.name.to_string(), reason.clone()));
            }
        }
        if self.stages.len() != Stage::ORDER.len() {
            return Err(("PushSummary".into(), "extra stages recorded".into()));
        }
        if let MalwareResult::Findings(f) = &self.malware {
            return Err(("MalwareScan".into(), format!("findings: {f:?}")));
        }
        if self.commit_hash.trim().is_empty() {
            return Err(("PushSummary".into(), "empty commit hash".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SummaryError {
    #[error("incomplete stages: {0}")]
    IncompleteStages(String),
}

/// Assembles a release summary from nine successful stage results.
pub fn summarize_release(
    results: &[StageResult],
    commit_hash: &str,
    image_name: &str,
    file_links: Vec<String>,
) -> Result<ReleaseSummary, SummaryError> {
    if results.len() != Stage::ORDER.len() {
        return Err(SummaryError::IncompleteStages(format!("{} of 9 stage results", results.len())));
    }
    for (r, expected) in results.iter().zip(Stage::ORDER) {
        if r.stage != expected {
            return Err(SummaryError::IncompleteStages(format!("expected {expected}, found {}", r.stage)));
        }
        if !r.status.is_success() {
            return Err(SummaryError::IncompleteStages(format!("{} did not succeed", r.stage)));
        }
    }
    if commit_hash.trim().is_empty() {
        return Err(SummaryError::IncompleteStages("no commit hash resolved".into()));
    }
    let mut vulnerabilities = VulnerabilityCounts::default();
    for f in results[Stage::VulnerabilityScan.index()].vulnerability_findings() {
        match f.severity {
            Severity::High => vulnerabilities.high += 1,
            Severity::Critical => vulnerabilities.critical += 1,
            _ => {}
        }
    }
    let malware_findings = results[Stage::MalwareScan.index()].malware_findings();
    let malware =
        if malware_findings.is_empty() { MalwareResult::Clean } else { MalwareResult::Findings(malware_findings) };
    let stages = results
        .iter()
        .map(|r| StageRecord { name: r.stage, status: r.status.clone(), log_ref: Digest::of(r.log.as_bytes()) })
        .collect();
    Ok(ReleaseSummary {
        image_name: image_name.to_string(),
        commit_hash: commit_hash.to_string(),
        file_links,
        vulnerabilities,
        malware,
        stages,
    })
}
