//! Stage executors.
//!
//! Three tiers share the [`StageExecutor`] interface: deterministic
//! simulated executors (the default), shell-out adapters that call real
//! builder and scanner binaries, and recording wrappers for invocation
//! tracking and failure injection.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};

use serde_json::json;

use super::extract::safe_extract;
use super::summary::{Severity, Stage, StageResult, VulnerabilityFinding};
use super::{run_test_stage, BuildContext};
use crate::digest::Digest;

pub trait StageExecutor: Send {
    fn execute(&mut self, stage: Stage, ctx: &mut BuildContext) -> StageResult;
}

/// One executor per stage. Always complete: unspecified stages default to
/// the simulated executor.
pub struct ExecutorSet {
    slots: Vec<Box<dyn StageExecutor>>,
}

impl ExecutorSet {
    pub fn simulated() -> Self {
        Self::simulated_with(SimulatedExecutor::default())
    }

    pub fn simulated_with(sim: SimulatedExecutor) -> Self {
        ExecutorSet { slots: Stage::ORDER.iter().map(|_| Box::new(sim.clone()) as Box<dyn StageExecutor>).collect() }
    }

    /// Shell-out adapters for the stages that need external binaries.
    pub fn shell() -> Self {
        let mut set = Self::simulated();
        for stage in [
            Stage::FetchRepository,
            Stage::BuildImage,
            Stage::Test,
            Stage::VulnerabilityScan,
            Stage::MalwareScan,
            Stage::PushImage,
        ] {
            set.set(stage, Box::new(ShellExecutor::default()));
        }
        set
    }

    /// Wraps every executor so invocations are appended to `log`, failing
    /// `fail_at` (if given) without running its inner executor.
    pub fn recording(mut self, log: Arc<Mutex<Vec<Stage>>>, fail_at: Option<Stage>) -> Self {
        let slots = std::mem::take(&mut self.slots);
        self.slots = slots
            .into_iter()
            .zip(Stage::ORDER)
            .map(|(inner, stage)| {
                let mut rec = RecordingExecutor::new(inner, log.clone());
                if fail_at == Some(stage) {
                    rec = rec.failing(&format!("injected failure at {stage}"));
                }
                Box::new(rec) as Box<dyn StageExecutor>
            })
            .collect();
        self
    }

    pub fn with(mut self, stage: Stage, exec: impl StageExecutor + 'static) -> Self {
        self.set(stage, Box::new(exec));
        self
    }

    pub fn set(&mut self, stage: Stage, exec: Box<dyn StageExecutor>) {
        self.slots[stage.index()] = exec;
    }

    pub fn get_mut(&mut self, stage: Stage) -> &mut dyn StageExecutor {
        self.slots[stage.index()].as_mut()
    }
}

/// Records each invocation; optionally fails instead of delegating.
pub struct RecordingExecutor {
    inner: Box<dyn StageExecutor>,
    log: Arc<Mutex<Vec<Stage>>>,
    fail_with: Option<String>,
}

impl RecordingExecutor {
    pub fn new(inner: Box<dyn StageExecutor>, log: Arc<Mutex<Vec<Stage>>>) -> Self {
        RecordingExecutor { inner, log, fail_with: None }
    }

    pub fn failing(mut self, reason: &str) -> Self {
        self.fail_with = Some(reason.to_string());
        self
    }
}

impl StageExecutor for RecordingExecutor {
    fn execute(&mut self, stage: Stage, ctx: &mut BuildContext) -> StageResult {
        self.log.lock().unwrap().push(stage);
        match &self.fail_with {
            Some(reason) => {
                let mut r = StageResult::failure(stage, reason.clone(), reason.clone());
                if stage == Stage::MalwareScan {
                    r = r.with_report(json!({ "findings": [reason] }));
                }
                r
            }
            None => self.inner.execute(stage, ctx),
        }
    }
}

/// The EICAR anti-malware test signature.
pub const EICAR_SIGNATURE: &str = "EICAR-STANDARD-ANTIVIRUS-TEST-FILE";

/// Deterministic in-process stand-in for every stage.
#[derive(Debug, Clone, Default)]
pub struct SimulatedExecutor {
    /// Findings reported by the vulnerability scan (any severity; only HIGH
    /// and CRITICAL survive into the report).
    pub vulnerabilities: Vec<VulnerabilityFinding>,
    pub test_exit_code: i32,
}

impl StageExecutor for SimulatedExecutor {
    fn execute(&mut self, stage: Stage, ctx: &mut BuildContext) -> StageResult {
        match stage {
            Stage::FetchConfig => match ctx.config.check() {
                Ok(()) => StageResult::success(
                    stage,
                    format!("repository={} image={}", ctx.config.repository, ctx.config.image_name),
                ),
                Err(e) => StageResult::failure(stage, e.clone(), e),
            },
            Stage::FetchRepository => sim_fetch_repository(ctx),
            Stage::FetchFiles => fetch_files(ctx),
            Stage::BuildImage => {
                let tree = match tree_digest(&ctx.repo_dir()) {
                    Ok(d) => d,
                    Err(e) => return StageResult::failure(stage, e.to_string(), ""),
                };
                let image_ref = format!("{}@sha256:{}", ctx.config.image_name, tree);
                ctx.image_ref = Some(image_ref.clone());
                StageResult::success(stage, format!("built {image_ref}"))
            }
            Stage::Test => {
                let image = ctx.image_ref.clone().unwrap_or_default();
                let code = self.test_exit_code;
                let runner = SimulatedEntrypoint::from_fn(move |_, env| {
                    if env.get("TEST_MODE").map(String::as_str) != Some("true") {
                        return (1, "TEST_MODE not set".into());
                    }
                    (code, format!("entry point exited {code} in test mode"))
                });
                run_test_stage(&image, &runner)
            }
            Stage::VulnerabilityScan => {
                let findings: Vec<_> =
                    self.vulnerabilities.iter().filter(|f| f.severity.is_reportable()).cloned().collect();
                StageResult::success(stage, format!("{} HIGH/CRITICAL findings", findings.len()))
                    .with_report(json!({ "findings": findings }))
            }
            Stage::MalwareScan => sim_malware_scan(ctx),
            Stage::PushImage => push_log(ctx, |_, _| Ok(String::new())),
            Stage::PushSummary => resolve_file_links(ctx),
        }
    }
}

fn sim_fetch_repository(ctx: &mut BuildContext) -> StageResult {
    let stage = Stage::FetchRepository;
    let repo = ctx.repo_dir();
    if let Err(e) = fs::create_dir_all(&repo) {
        return StageResult::failure(stage, e.to_string(), "");
    }
    let source = PathBuf::from(&ctx.config.repository);
    let copied = if source.is_dir() {
        copy_tree(&source, &repo)
    } else {
        fs::write(repo.join("README.md"), format!("# {}\n", ctx.config.repository))
            .and_then(|_| fs::write(repo.join("main.py"), "def main(config, inputs):\n    return {}\n"))
            .map(|_| 2)
    };
    let count = match copied {
        Ok(n) => n,
        Err(e) => return StageResult::failure(stage, format!("checkout failed: {e}"), ""),
    };
    let commit = match tree_digest(&repo) {
        Ok(d) => d.short(40),
        Err(e) => return StageResult::failure(stage, e.to_string(), ""),
    };
    ctx.freeze_commit(&commit);
    StageResult::success(stage, format!("checked out {count} files at {commit}"))
}

fn fetch_files(ctx: &mut BuildContext) -> StageResult {
    let stage = Stage::FetchFiles;
    let Some(archive) = ctx.config.archive.clone() else {
        return StageResult::success(stage, "no files to inject");
    };
    let bytes = match fs::read(&archive) {
        Ok(b) => b,
        Err(e) => return StageResult::failure(stage, format!("cannot read {}: {e}", archive.display()), ""),
    };
    let dest = ctx.repo_dir().join(&ctx.config.model_directory);
    match safe_extract(&bytes, &dest) {
        Ok(files) => {
            let log = files.iter().map(|p| format!("extracted {}", p.display())).collect::<Vec<_>>().join("\n");
            ctx.extracted = files;
            StageResult::success(stage, log)
        }
        Err(e) => StageResult::failure(stage, e.to_string(), e.to_string()),
    }
}

fn sim_malware_scan(ctx: &mut BuildContext) -> StageResult {
    let stage = Stage::MalwareScan;
    let repo = ctx.repo_dir();
    let files = match list_files(&repo) {
        Ok(f) => f,
        Err(e) => return StageResult::failure(stage, e.to_string(), ""),
    };
    let mut findings = Vec::new();
    for rel in &files {
        let data = fs::read(repo.join(rel)).unwrap_or_default();
        if data.windows(EICAR_SIGNATURE.len()).any(|w| w == EICAR_SIGNATURE.as_bytes()) {
            findings.push(format!("{}: Eicar-Test-Signature", rel.display()));
        }
    }
    let log = format!("scanned {} files, {} findings", files.len(), findings.len());
    let report = json!({ "findings": findings });
    if findings.is_empty() {
        StageResult::success(stage, log).with_report(report)
    } else {
        StageResult::failure(stage, format!("malware detected: {}", findings.join(", ")), log).with_report(report)
    }
}

fn push_log(ctx: &mut BuildContext, push: impl Fn(&str, &[String]) -> Result<String, String>) -> StageResult {
    let stage = Stage::PushImage;
    let Some(image) = ctx.image_ref.clone() else {
        return StageResult::failure(stage, "no image built", "");
    };
    let platforms = ctx.config.platforms.clone();
    let out = match push(&image, &platforms) {
        Ok(o) => o,
        Err(e) => return StageResult::failure(stage, e.clone(), e),
    };
    let mut log: String = platforms.iter().map(|p| format!("pushed {image} for {p}\n")).collect();
    log.push_str(&out);
    let report = json!({
        "platforms": platforms.iter().map(|p| json!({"platform": p, "status": "pushed"})).collect::<Vec<_>>()
    });
    StageResult::success(stage, log).with_report(report)
}

fn resolve_file_links(ctx: &mut BuildContext) -> StageResult {
    let stage = Stage::PushSummary;
    let Some(commit) = ctx.commit_hash().map(str::to_string) else {
        return StageResult::failure(stage, "commit hash was never resolved", "");
    };
    let files = match list_files(&ctx.repo_dir()) {
        Ok(f) => f,
        Err(e) => return StageResult::failure(stage, e.to_string(), ""),
    };
    let base = ctx.config.repository.trim_end_matches('/').trim_end_matches(".git").to_string();
    ctx.file_links = files.iter().map(|f| format!("{base}/blob/{commit}/{}", f.display())).collect();
    StageResult::success(stage, format!("summary for {commit} with {} file links", ctx.file_links.len()))
}

/// Relative paths of all regular files under `root`, sorted.
pub(crate) fn list_files(root: &Path) -> std::io::Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let ft = entry.file_type()?;
            let path = entry.path();
            if ft.is_dir() {
                if entry.file_name() == ".git" {
                    continue;
                }
                walk(root, &path, out)?;
            } else if ft.is_file() {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    if root.exists() {
        walk(root, root, &mut out)?;
    }
    out.sort();
    Ok(out)
}

fn tree_digest(root: &Path) -> std::io::Result<Digest> {
    let mut acc = Vec::new();
    for rel in list_files(root)? {
        let data = fs::read(root.join(&rel))?;
        acc.extend_from_slice(rel.to_string_lossy().as_bytes());
        acc.push(0);
        acc.extend_from_slice(Digest::of(&data).as_bytes());
    }
    Ok(Digest::of(&acc))
}

fn copy_tree(src: &Path, dst: &Path) -> std::io::Result<usize> {
    let files = list_files(src)?;
    for rel in &files {
        let to = dst.join(rel);
        if let Some(parent) = to.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::copy(src.join(rel), to)?;
    }
    Ok(files.len())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntrypointOutput {
    pub exit_code: i32,
    pub log: String,
}

/// Launches a built image's entry point in an isolated context.
pub trait EntrypointRunner: Send + Sync {
    fn run(&self, image_ref: &str, env: &BTreeMap<String, String>) -> Result<EntrypointOutput, String>;
}

type EntryFn = dyn Fn(&str, &BTreeMap<String, String>) -> (i32, String) + Send + Sync;

pub struct SimulatedEntrypoint {
    f: Box<EntryFn>,
}

impl SimulatedEntrypoint {
    pub fn from_fn(f: impl Fn(&str, &BTreeMap<String, String>) -> (i32, String) + Send + Sync + 'static) -> Self {
        SimulatedEntrypoint { f: Box::new(f) }
    }

    pub fn exiting(code: i32, log: &str) -> Self {
        let log = log.to_string();
        Self::from_fn(move |_, _| (code, log.clone()))
    }
}

impl EntrypointRunner for SimulatedEntrypoint {
    fn run(&self, image_ref: &str, env: &BTreeMap<String, String>) -> Result<EntrypointOutput, String> {
        let (exit_code, log) = (self.f)(image_ref, env);
        Ok(EntrypointOutput { exit_code, log })
    }
}

/// Runs the entry point through a container runtime binary.
pub struct ShellEntrypoint {
    pub runtime: String,
}

impl EntrypointRunner for ShellEntrypoint {
    fn run(&self, image_ref: &str, env: &BTreeMap<String, String>) -> Result<EntrypointOutput, String> {
        let mut cmd = Command::new(&self.runtime);
        cmd.args(["run", "--rm", "--network", "none"]);
        for (k, v) in env {
            cmd.arg("-e").arg(format!("{k}={v}"));
        }
        cmd.arg(image_ref);
        let (code, log) = run_command(&mut cmd)?;
        Ok(EntrypointOutput { exit_code: code, log })
    }
}

fn run_command(cmd: &mut Command) -> Result<(i32, String), String> {
    let program = cmd.get_program().to_string_lossy().into_owned();
    let out = cmd.output().map_err(|e| format!("cannot run `{program}`: {e}"))?;
    let mut log = String::from_utf8_lossy(&out.stdout).into_owned();
    log.push_str(&String::from_utf8_lossy(&out.stderr));
    Ok((out.status.code().unwrap_or(-1), log))
}

/// Adapters that invoke `git`, a container runtime, `trivy` and `clamscan`.
#[derive(Debug, Clone)]
pub struct ShellExecutor {
    pub git: String,
    pub runtime: String,
    pub scanner: String,
    pub antivirus: String,
}

impl Default for ShellExecutor {
    fn default() -> Self {
        ShellExecutor {
            git: "git".into(),
            runtime: "docker".into(),
            scanner: "trivy".into(),
            antivirus: "clamscan".into(),
        }
    }
}

impl StageExecutor for ShellExecutor {
    fn execute(&mut self, stage: Stage, ctx: &mut BuildContext) -> StageResult {
        match stage {
            Stage::FetchRepository => {
                let repo = ctx.repo_dir();
                let clone = run_command(
                    Command::new(&self.git).args(["clone", "--depth", "1", &ctx.config.repository]).arg(&repo),
                );
                match clone {
                    Ok((0, _)) => {}
                    Ok((code, log)) => return StageResult::failure(stage, format!("git clone exited {code}"), log),
                    Err(e) => return StageResult::failure(stage, e.clone(), e),
                }
                match run_command(Command::new(&self.git).arg("-C").arg(&repo).args(["rev-parse", "HEAD"])) {
                    Ok((0, out)) => {
                        let commit = out.trim().to_string();
                        ctx.freeze_commit(&commit);
                        StageResult::success(stage, format!("cloned at {commit}"))
                    }
                    Ok((code, log)) => StageResult::failure(stage, format!("rev-parse exited {code}"), log),
                    Err(e) => StageResult::failure(stage, e.clone(), e),
                }
            }
            Stage::BuildImage => {
                let image = ctx.config.image_name.clone();
                let mut cmd = Command::new(&self.runtime);
                cmd.env("DOCKER_BUILDKIT", "1").args(["build", "-t", &image]).arg(ctx.repo_dir());
                match run_command(&mut cmd) {
                    Ok((0, log)) => {
                        ctx.image_ref = Some(image);
                        StageResult::success(stage, log)
                    }
                    Ok((code, log)) => StageResult::failure(stage, format!("build exited {code}"), log),
                    Err(e) => StageResult::failure(stage, e.clone(), e),
                }
            }
            Stage::Test => {
                let image = ctx.image_ref.clone().unwrap_or_default();
                run_test_stage(&image, &ShellEntrypoint { runtime: self.runtime.clone() })
            }
            Stage::VulnerabilityScan => {
                let image = ctx.image_ref.clone().unwrap_or_default();
                let mut cmd = Command::new(&self.scanner);
                cmd.args(["image", "--quiet", "--format", "json", "--severity", "HIGH,CRITICAL", &image]);
                match run_command(&mut cmd) {
                    Ok((0, out)) => match parse_trivy(&out) {
                        Ok(findings) => StageResult::success(stage, format!("{} findings", findings.len()))
                            .with_report(json!({ "findings": findings, "raw": out })),
                        Err(e) => StageResult::failure(stage, e.clone(), out),
                    },
                    Ok((code, log)) => StageResult::failure(stage, format!("scanner exited {code}"), log),
                    Err(e) => StageResult::failure(stage, e.clone(), e),
                }
            }
            Stage::MalwareScan => {
                let mut cmd = Command::new(&self.antivirus);
                cmd.args(["-r", "-i", "--no-summary"]).arg(ctx.repo_dir());
                match run_command(&mut cmd) {
                    Ok((0, log)) => StageResult::success(stage, log).with_report(json!({ "findings": [] })),
                    Ok((1, log)) => {
                        let findings: Vec<String> =
                            log.lines().filter(|l| l.ends_with("FOUND")).map(str::to_string).collect();
                        StageResult::failure(stage, "malware detected", log.clone())
                            .with_report(json!({ "findings": findings }))
                    }
                    Ok((code, log)) => StageResult::failure(stage, format!("antivirus exited {code}"), log),
                    Err(e) => StageResult::failure(stage, e.clone(), e),
                }
            }
            Stage::PushImage => {
                let runtime = self.runtime.clone();
                let repo = ctx.repo_dir();
                push_log(ctx, move |image, platforms| {
                    let mut cmd = Command::new(&runtime);
                    cmd.args(["buildx", "build", "--platform", &platforms.join(","), "--push", "-t", image]).arg(&repo);
                    match run_command(&mut cmd)? {
                        (0, log) => Ok(log),
                        (code, log) => Err(format!("push exited {code}: {log}")),
                    }
                })
            }
            other => SimulatedExecutor::default().execute(other, ctx),
        }
    }
}

fn parse_trivy(out: &str) -> Result<Vec<VulnerabilityFinding>, String> {
    let v: serde_json::Value = serde_json::from_str(out).map_err(|e| format!("unreadable scan report: {e}"))?;
    let mut findings = Vec::new();
    for result in v.get("Results").and_then(|r| r.as_array()).into_iter().flatten() {
        for vuln in result.get("Vulnerabilities").and_then(|r| r.as_array()).into_iter().flatten() {
            let severity = match vuln.get("Severity").and_then(|s| s.as_str()) {
                Some("CRITICAL") => Severity::Critical,
                Some("HIGH") => Severity::High,
                _ => continue,
            };
            findings.push(VulnerabilityFinding {
                id: vuln.get("VulnerabilityID").and_then(|s| s.as_str()).unwrap_or_default().to_string(),
                severity,
                package: vuln.get("PkgName").and_then(|s| s.as_str()).unwrap_or_default().to_string(),
            });
        }
    }
    Ok(findings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivy_report_filtered_to_high_and_critical() {
        let raw = r#"{"Results":[{"Vulnerabilities":[
            {"VulnerabilityID":"CVE-1","Severity":"HIGH","PkgName":"openssl"},
            {"VulnerabilityID":"CVE-2","Severity":"MEDIUM","PkgName":"zlib"},
            {"VulnerabilityID":"CVE-3","Severity":"CRITICAL","PkgName":"glibc"}]}]}"#;
        let f = parse_trivy(raw).unwrap();
        assert_eq!(f.iter().map(|f| f.id.as_str()).collect::<Vec<_>>(), ["CVE-1", "CVE-3"]);
    }

    #[test]
    fn missing_binary_fails_stage() {
        let mut ctx = BuildContext::new(super::super::BuildConfig::new("r", "i")).unwrap();
        let mut ex = ShellExecutor { git: "/nonexistent/git-binary".into(), ..Default::default() };
        let r = ex.execute(Stage::FetchRepository, &mut ctx);
        assert!(!r.status.is_success());
    }
}
