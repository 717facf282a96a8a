//! The server-controlled nine-stage release pipeline.
//!
//! Stages run strictly in [`Stage::ORDER`]. The first failing stage aborts
//! the run before the next stage is invoked, and a [`ReleaseSummary`] exists
//! only when every stage succeeded.

pub mod executors;
pub mod extract;
pub mod summary;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use executors::{
    EntrypointRunner, ExecutorSet, RecordingExecutor, ShellEntrypoint, ShellExecutor, SimulatedEntrypoint,
    SimulatedExecutor, StageExecutor,
};
pub use extract::{safe_extract, sanitize_entry_name, ExtractError};
pub use summary::{
    summarize_release, MalwareResult, ReleaseSummary, Severity, Stage, StageRecord, StageResult, StageStatus,
    SummaryError, VulnerabilityCounts, VulnerabilityFinding,
};

/// Build request as fetched from the backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildConfig {
    /// Tool id and version this build is linked to, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    pub repository: String,
    pub image_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credentials_ref: Option<String>,
    /// ZIP archive injected into the model directory during FetchFiles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archive: Option<PathBuf>,
    #[serde(default = "default_model_dir")]
    pub model_directory: PathBuf,
    pub platforms: Vec<String>,
}

fn default_model_dir() -> PathBuf {
    PathBuf::from("model")
}

impl BuildConfig {
    pub fn new(repository: &str, image_name: &str) -> Self {
        BuildConfig {
            tool_id: None,
            version: None,
            repository: repository.to_string(),
            image_name: image_name.to_string(),
            credentials_ref: None,
            archive: None,
            model_directory: default_model_dir(),
            platforms: vec!["linux/amd64".into()],
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.repository.trim().is_empty() {
            return Err("repository source is empty".into());
        }
        if self.image_name.trim().is_empty() {
            return Err("target image name is empty".into());
        }
        if self.platforms.is_empty() {
            return Err("at least one target platform is required".into());
        }
        let md = self.model_directory.to_string_lossy();
        match sanitize_entry_name(&md) {
            Ok(rel) if !rel.as_os_str().is_empty() => Ok(()),
            Ok(_) => Err("model directory is empty".into()),
            Err(e) => Err(format!("model directory must be relative without traversal: {e}")),
        }
    }
}

/// Mutable state threaded through one pipeline run.
pub struct BuildContext {
    pub config: BuildConfig,
    workspace: tempfile::TempDir,
    commit_hash: Option<String>,
    pub image_ref: Option<String>,
    pub file_links: Vec<String>,
    pub extracted: Vec<PathBuf>,
}

impl BuildContext {
    pub fn new(config: BuildConfig) -> std::io::Result<Self> {
        Ok(BuildContext {
            config,
            workspace: tempfile::Builder::new().prefix("posy-build-").tempdir()?,
            commit_hash: None,
            image_ref: None,
            file_links: Vec::new(),
            extracted: Vec::new(),
        })
    }

    /// Fresh, pipeline-owned working directory for this run.
    pub fn workspace(&self) -> &Path {
        self.workspace.path()
    }

    /// Directory the repository is checked out into.
    pub fn repo_dir(&self) -> PathBuf {
        self.workspace.path().join("repo")
    }

    pub fn commit_hash(&self) -> Option<&str> {
        self.commit_hash.as_deref()
    }

    /// Records the commit resolved at checkout. The first value wins, so a
    /// later repository mutation cannot change the hash for this run.
    pub fn freeze_commit(&mut self, hash: &str) {
        if self.commit_hash.is_none() {
            self.commit_hash = Some(hash.to_string());
        }
    }
}

/// Receives the final summary on success.
pub trait SummarySink {
    fn upload(&mut self, summary: &ReleaseSummary, image_ref: &str) -> Result<(), String>;
}

/// Sink that discards the summary.
pub struct NullSink;

impl SummarySink for NullSink {
    fn upload(&mut self, _: &ReleaseSummary, _: &str) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineSuccess {
    pub summary: ReleaseSummary,
    pub image_ref: String,
    pub results: Vec<StageResult>,
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("pipeline failed at {stage}: {reason}")]
pub struct PipelineFailure {
    pub stage: Stage,
    pub reason: String,
    /// Results up to and including the failed stage.
    pub results: Vec<StageResult>,
}

/// Runs the nine stages in order and uploads the summary on success.
pub fn run_pipeline(
    config: BuildConfig,
    executors: &mut ExecutorSet,
    sink: &mut dyn SummarySink,
) -> Result<PipelineSuccess, PipelineFailure> {
    let mut ctx = BuildContext::new(config).map_err(|e| PipelineFailure {
        stage: Stage::FetchConfig,
        reason: format!("cannot create workspace: {e}"),
        results: Vec::new(),
    })?;
    let mut results: Vec<StageResult> = Vec::with_capacity(9);
    for stage in Stage::ORDER {
        let mut r = executors.get_mut(stage).execute(stage, &mut ctx);
        // A mislabelled result still belongs to the stage that produced it.
        r.stage = stage;
        if stage == Stage::VulnerabilityScan {
            filter_reportable(&mut r);
        }
        let failed = match &r.status {
            StageStatus::Failure(reason) => Some(reason.clone()),
            StageStatus::Success => None,
        };
        results.push(r);
        if let Some(reason) = failed {
            return Err(PipelineFailure { stage, reason, results });
        }
    }
    let fail_last = |results: &mut Vec<StageResult>, reason: String| {
        let last = results.last_mut().expect("nine results");
        last.status = StageStatus::Failure(reason.clone());
        PipelineFailure { stage: Stage::PushSummary, reason, results: std::mem::take(results) }
    };
    let image_ref = match ctx.image_ref.clone() {
        Some(i) => i,
        None => return Err(fail_last(&mut results, "no image reference recorded".into())),
    };
    let commit = ctx.commit_hash().unwrap_or_default().to_string();
    let summary = match summarize_release(&results, &commit, &ctx.config.image_name, ctx.file_links.clone()) {
        Ok(s) => s,
        Err(e) => return Err(fail_last(&mut results, e.to_string())),
    };
    if let Err(e) = sink.upload(&summary, &image_ref) {
        return Err(fail_last(&mut results, format!("summary upload failed: {e}")));
    }
    Ok(PipelineSuccess { summary, image_ref, results })
}

fn filter_reportable(r: &mut StageResult) {
    let findings: Vec<VulnerabilityFinding> =
        r.vulnerability_findings().into_iter().filter(|f| f.severity.is_reportable()).collect();
    if let Some(report) = r.report.as_mut().and_then(|v| v.as_object_mut()) {
        report.insert("findings".into(), serde_json::to_value(findings).expect("serializable"));
    }
}

/// Runs the tool entry point of `image_ref` with the platform test
/// environment (`TEST_MODE=true`).
pub fn run_test_stage(image_ref: &str, runner: &dyn EntrypointRunner) -> StageResult {
    let env: BTreeMap<String, String> = [("TEST_MODE".to_string(), "true".to_string())].into();
    match runner.run(image_ref, &env) {
        Ok(out) if out.exit_code == 0 => StageResult::success(Stage::Test, out.log),
        Ok(out) => StageResult::failure(Stage::Test, format!("entry point exited with {}", out.exit_code), out.log),
        Err(e) => StageResult::failure(Stage::Test, format!("entry point could not run: {e}"), e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Mutex};

    #[test]
    fn simulated_pipeline_succeeds() {
        let mut ex = ExecutorSet::simulated();
        let ok =
            run_pipeline(BuildConfig::new("https://example.org/r.git", "posy/split:1.0.0"), &mut ex, &mut NullSink)
                .unwrap();
        assert_eq!(ok.results.len(), 9);
        assert_eq!(ok.summary.image_name, "posy/split:1.0.0");
        assert_eq!(ok.summary.commit_hash.len(), 40);
        assert!(ok.summary.check_gates().is_ok());
        assert!(ok.image_ref.starts_with("posy/split:1.0.0@sha256:"));
    }

    #[test]
    fn config_rejects_traversal_model_dir() {
        let mut c = BuildConfig::new("r", "i");
        c.model_directory = PathBuf::from("../outside");
        assert!(c.check().is_err());
        c.model_directory = PathBuf::from("/abs");
        assert!(c.check().is_err());
        c.model_directory = PathBuf::from("models/weights");
        assert!(c.check().is_ok());
    }

    #[test]
    fn test_stage_sets_test_mode() {
        let seen = Arc::new(Mutex::new(None));
        let s2 = seen.clone();
        let runner = SimulatedEntrypoint::from_fn(move |_img, env| {
            *s2.lock().unwrap() = env.get("TEST_MODE").cloned();
            (0, "ok".into())
        });
        let r = run_test_stage("img", &runner);
        assert!(r.status.is_success());
        assert_eq!(seen.lock().unwrap().as_deref(), Some("true"));
        let failing = SimulatedEntrypoint::exiting(1, "boom");
        let r = run_test_stage("img", &failing);
        assert!(!r.status.is_success());
        assert_eq!(r.log, "boom");
    }

    #[test]
    fn upload_failure_fails_push_summary() {
        struct Refuse;
        impl SummarySink for Refuse {
            fn upload(&mut self, _: &ReleaseSummary, _: &str) -> Result<(), String> {
                Err("backend down".into())
            }
        }
        let err = run_pipeline(BuildConfig::new("r", "i"), &mut ExecutorSet::simulated(), &mut Refuse).unwrap_err();
        assert_eq!(err.stage, Stage::PushSummary);
        assert_eq!(err.results.len(), 9);
    }

    #[test]
    fn commit_hash_frozen() {
        let mut ctx = BuildContext::new(BuildConfig::new("r", "i")).unwrap();
        ctx.freeze_commit("aaa");
        ctx.freeze_commit("bbb");
        assert_eq!(ctx.commit_hash(), Some("aaa"));
    }
}
