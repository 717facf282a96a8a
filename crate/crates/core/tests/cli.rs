use std::path::{Path, PathBuf};
use std::process::Command;

use posy_core::agent::bench::parse_score_inputs;
use posy_core::agent::{load_benchmark, run_benchmark, score_inputs, BenchReport, ScoreMode, ScriptedBackend};
use posy_core::cli::{dispatch, CommandOutcome, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use posy_core::lifecycle::{RunRecord, RunState};
use posy_core::orchestrator::{Backend, StubCatalog};
use posy_core::pipeline::ReleaseSummary;
use posy_core::registry::{render_tool_config, ToolVersion, VersionLabel, VersionState};
use posy_core::workflow::{parse_workflow, validate_graph, ExecutionPlan};
use serde_json::Value;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn wf11() -> PathBuf {
    root().join("fixtures/workflows/11-split-and-merge-workflow.yaml")
}

fn posy(data: &Path, args: &[&str]) -> CommandOutcome {
    let mut argv = vec!["posy".to_string(), "--data-dir".into(), data.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    dispatch(argv, &mut |_| {}).0
}

fn data(o: &CommandOutcome) -> Value {
    o.data.clone().expect("structured output")
}

fn bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_posy")).args(args).output().unwrap()
}

#[test]
fn validate_prints_the_plan() {
    let dir = tempfile::tempdir().unwrap();
    let o = posy(dir.path(), &["workflow", "validate", wf11().to_str().unwrap()]);
    assert_eq!(o.code, EXIT_OK, "{}", o.text);
    assert!(o.text.contains("workflow split-and-merge is valid"));
    let lines: Vec<&str> = o.text.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].contains("fetch (uci-fetch@1.0.0)"));
    assert!(lines[5].contains("cluster (agglomerative-clustering@1.0.0)"));

    // Same plan as the library computes.
    let b = Backend::open(dir.path()).unwrap();
    let graph = parse_workflow(&std::fs::read_to_string(wf11()).unwrap()).unwrap();
    let lib = validate_graph(&graph, &b.registry).unwrap();
    let cli: ExecutionPlan = serde_json::from_value(data(&o)).unwrap();
    assert_eq!(cli, lib);
}

#[test]
fn binary_exit_codes() {
    let out = bin(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage:"));
    assert_eq!(bin(&["bench", "score", "--mode", "sideways", "--file", "x"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(bin(&["workflow"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(bin(&["--help"]).status.code(), Some(EXIT_OK));

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = bin(&["--data-dir", d, "workflow", "validate", wf11().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8_lossy(&out.stdout).contains("split-and-merge"));
    let out = bin(&["--data-dir", d, "--json", "run", "status", "run-missing"]);
    assert_eq!(out.status.code(), Some(EXIT_FAILURE));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["error"].as_str().unwrap().contains("not found"));
}

#[test]
fn invalid_workflow_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(wf11()).unwrap().replace("to: cluster.features", "to: cluster.nonexistent");
    let f = dir.path().join("bad.yaml");
    std::fs::write(&f, text).unwrap();
    let o = posy(dir.path(), &["workflow", "validate", f.to_str().unwrap()]);
    assert_eq!(o.code, EXIT_FAILURE);
    assert!(o.text.contains("invalid"));
    assert!(!data(&o)["violations"].as_array().unwrap().is_empty());
}

#[test]
fn bench_score_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let fx = root().join("fixtures/bench");
    let run = posy(
        dir.path(),
        &[
            "bench",
            "run",
            "--file",
            fx.join("benchmark.yaml").to_str().unwrap(),
            "--script",
            fx.join("script.yaml").to_str().unwrap(),
        ],
    );
    assert_eq!(run.code, EXIT_OK, "{}", run.text);
    let report: BenchReport = serde_json::from_value(data(&run)).unwrap();
    let items = load_benchmark(&fx.join("benchmark.yaml")).unwrap();
    let backend = ScriptedBackend::load(&fx.join("script.yaml")).unwrap();
    let lib = run_benchmark(&items, &fx.join("files"), &backend, None).unwrap();
    assert_eq!(report, lib);

    let f = dir.path().join("report.json");
    std::fs::write(&f, run.render(true)).unwrap();
    let inputs = parse_score_inputs(&std::fs::read_to_string(&f).unwrap()).unwrap();
    for (mode, lib_mode) in [("strict", ScoreMode::Strict), ("relaxed", ScoreMode::Relaxed)] {
        let o = posy(dir.path(), &["bench", "score", "--mode", mode, "--file", f.to_str().unwrap()]);
        assert_eq!(o.code, EXIT_OK);
        let expected = serde_json::to_value(score_inputs(&inputs, lib_mode).unwrap()).unwrap();
        assert_eq!(data(&o), expected);
    }
    let relaxed = posy(dir.path(), &["bench", "score", "--mode", "relaxed", "--file", f.to_str().unwrap()]);
    assert!(relaxed.text.ends_with("Relaxed score: 100.00 over 12 items"));
}

#[test]
fn hitl_script_overrides_item_answers() {
    let dir = tempfile::tempdir().unwrap();
    let fx = root().join("fixtures/bench");
    let h = dir.path().join("hitl.yaml");
    std::fs::write(&h, "- answer: teaching value\n").unwrap();
    let o = posy(
        dir.path(),
        &["bench", "run", "--file", fx.join("benchmark.yaml").to_str().unwrap(), "--hitl-script", h.to_str().unwrap()],
    );
    assert_eq!(o.code, EXIT_OK);
    let report: BenchReport = serde_json::from_value(data(&o)).unwrap();
    let hitl_items: Vec<_> =
        report.items.iter().filter(|i| i.actual.contains(&posy_core::agent::AgentKind::HumanInTheLoop)).collect();
    assert_eq!(hitl_items.len(), 2);
    assert!(hitl_items.iter().all(|i| i.answer.contains("teaching value")));
}

#[test]
fn workflow_run_and_run_inspection() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let wf = wf11();
    let argv = ["posy", "--data-dir", dir.path().to_str().unwrap(), "workflow", "run", wf.to_str().unwrap()];
    let (o, _) = dispatch(argv, &mut |l| lines.push(l.to_string()));
    assert_eq!(o.code, EXIT_OK, "{}", o.text);
    assert_eq!(lines.iter().filter(|l| l.ends_with("FINISHED")).count(), 6);
    let d = data(&o);
    let exec = d["execution_id"].as_str().unwrap();
    let cluster = d["runs"]["cluster"].as_str().unwrap();

    let st = posy(dir.path(), &["workflow", "status", exec]);
    assert_eq!(st.code, EXIT_OK);
    assert_eq!(data(&st)["states"], d["states"]);

    let rs = posy(dir.path(), &["run", "status", cluster]);
    let rec: RunRecord = serde_json::from_value(data(&rs)).unwrap();
    assert_eq!(rec.state, RunState::Finished);
    assert_eq!(rec, Backend::open(dir.path()).unwrap().load_run(cluster).unwrap());

    let out = dir.path().join("out");
    let ro = posy(dir.path(), &["run", "outputs", cluster, "--out", out.to_str().unwrap()]);
    assert_eq!(ro.code, EXIT_OK);
    for (port, digest) in &rec.outputs {
        let bytes = std::fs::read(out.join(port)).unwrap();
        assert_eq!(posy_core::digest::Digest::of(&bytes), *digest);
    }
    let logs = posy(dir.path(), &["run", "logs", cluster]);
    assert_eq!(logs.code, EXIT_OK);
    assert!(logs.text.contains("agglomerative-clustering"));
}

#[test]
fn register_publish_list_show() {
    let dir = tempfile::tempdir().unwrap();
    let stub = StubCatalog::standard().tools().next().unwrap().spec.clone();
    let v2 = VersionLabel { major: 2, minor: 0, patch: 0 };
    let cfg = dir.path().join("tool.yaml");
    std::fs::write(&cfg, render_tool_config(&stub, v2)).unwrap();
    let r = posy(dir.path(), &["tool", "register", cfg.to_str().unwrap()]);
    assert_eq!(r.code, EXIT_OK, "{}", r.text);
    let v: ToolVersion = serde_json::from_value(data(&r)).unwrap();
    assert_eq!(v.state, VersionState::Draft);
    let again = posy(dir.path(), &["tool", "register", cfg.to_str().unwrap()]);
    assert_eq!(again.code, EXIT_FAILURE);

    let key = format!("{}@2.0.0", stub.tool_id);
    let p = posy(dir.path(), &["tool", "publish", &key, "--simulate"]);
    assert_eq!(p.code, EXIT_OK, "{}", p.text);
    let shown = posy(dir.path(), &["tool", "show", stub.tool_id.as_str()]);
    let v: ToolVersion = serde_json::from_value(data(&shown)).unwrap();
    assert_eq!((v.version, v.state), (v2, VersionState::Published));
    assert_eq!(v, Backend::open(dir.path()).unwrap().registry.get(&v.key()).unwrap());

    let list = posy(dir.path(), &["tool", "list"]);
    let all: Vec<ToolVersion> = serde_json::from_value(data(&list)).unwrap();
    assert_eq!(all.len(), 9);
    assert_eq!(posy(dir.path(), &["tool", "show", "no-such-tool"]).code, EXIT_FAILURE);
}

#[test]
fn pipeline_build_simulated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("build.yaml");
    std::fs::write(&cfg, "repository: stub://demo\nimage_name: posy/demo:1.0.0\nplatforms: [linux/amd64]\n").unwrap();
    let o = posy(dir.path(), &["pipeline", "build", "--config", cfg.to_str().unwrap(), "--simulate"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.text);
    let summary: ReleaseSummary = serde_json::from_value(data(&o)["summary"].clone()).unwrap();
    assert_eq!(summary.stages.len(), 9);
    assert!(summary.check_gates().is_ok());

    std::fs::write(&cfg, "repository: stub://demo\nplatforms: []\n").unwrap();
    let o = posy(dir.path(), &["pipeline", "build", "--config", cfg.to_str().unwrap(), "--simulate"]);
    assert_eq!(o.code, EXIT_FAILURE);
}

#[test]
fn json_output_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = posy(dir.path(), &["--json", "workflow", "validate", wf11().to_str().unwrap()]);
    let printed = o.render(true);
    let decoded: ExecutionPlan = serde_json::from_str(&printed).unwrap();
    assert_eq!(serde_json::to_value(&decoded).unwrap(), data(&o));
    assert_eq!(o.render(false), o.text);
}
