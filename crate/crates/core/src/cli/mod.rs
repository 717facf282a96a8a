//! The `posy` command line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::agent::bench::parse_score_inputs;
use crate::agent::{
    load_benchmark, run_benchmark, score_inputs, BenchReport, CompletionBackend, ExternalBackend, HitlResponder,
    ScoreMode, ScriptedBackend, ScriptedHitl,
};
use crate::orchestrator::{Backend, ExecutionRecord, ExecutorKind, Orchestrator, StubCatalog};
use crate::pipeline::{run_pipeline, BuildConfig, ExecutorSet, NullSink, StageResult};
use crate::registry::{parse_tool_config, ToolId, VersionKey, VersionLabel, VersionSelector};
use crate::workflow::{parse_workflow, validate_graph};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Result of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutcome {
    pub code: i32,
    pub text: String,
    /// Structured result, printed instead of `text` under `--json`.
    pub data: Option<Value>,
}

impl CommandOutcome {
    fn ok(text: String, data: impl Serialize) -> Self {
        CommandOutcome { code: EXIT_OK, text, data: Some(serde_json::to_value(data).expect("serializable")) }
    }

    fn failed(text: String, data: impl Serialize) -> Self {
        CommandOutcome { code: EXIT_FAILURE, text, data: Some(serde_json::to_value(data).expect("serializable")) }
    }

    fn error(msg: impl std::fmt::Display) -> Self {
        let text = format!("error: {msg}");
        CommandOutcome { code: EXIT_FAILURE, data: Some(json!({ "error": msg.to_string() })), text }
    }

    /// What goes to the terminal.
    pub fn render(&self, as_json: bool) -> String {
        match (&self.data, as_json) {
            (Some(d), true) => serde_json::to_string_pretty(d).expect("json"),
            _ => self.text.clone(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "posy", version, about = "Tool registry, workflows, builds and agent benchmarks")]
pub struct Cli {
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    pub json: bool,
    /// Data root; defaults to $POSY_DATA_DIR or ./.posy.
    #[arg(long, global = true, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Do not install the built-in simulated tools.
    #[arg(long, global = true)]
    pub no_builtin_tools: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Register, publish and inspect tools.
    #[command(subcommand)]
    Tool(ToolCmd),
    /// Validate and run workflows.
    #[command(subcommand)]
    Workflow(WorkflowCmd),
    /// Inspect individual runs.
    #[command(subcommand)]
    Run(RunCmd),
    /// Build pipeline.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Agent benchmark.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Subcommand, Debug)]
pub enum ToolCmd {
    /// Register a draft version from a tool configuration file.
    Register {
        config: PathBuf,
    },
    /// Build and publish a registered version.
    Publish {
        /// `tool-id@major.minor.patch`
        tool: String,
        /// Use the simulated build stages.
        #[arg(long)]
        simulate: bool,
    },
    List,
    /// Show one version; the latest published one by default.
    Show {
        tool: String,
    },
}

#[derive(Subcommand, Debug)]
pub enum WorkflowCmd {
    Validate {
        file: PathBuf,
    },
    Run {
        file: PathBuf,
        #[arg(long, value_enum, default_value_t = Executor::Simulated)]
        executor: Executor,
    },
    /// States of the runs of one workflow execution.
    Status {
        execution_id: String,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Executor {
    Simulated,
    Container,
}

#[derive(Subcommand, Debug)]
pub enum RunCmd {
    Status {
        run_id: String,
    },
    Logs {
        run_id: String,
    },
    Outputs {
        run_id: String,
        /// Write the output artifacts into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum PipelineCmd {
    Build {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        simulate: bool,
    },
}

#[derive(Subcommand, Debug)]
pub enum BenchCmd {
    Run(BenchRun),
    /// Score recorded traces.
    Score {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        file: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct BenchRun {
    #[arg(long)]
    pub file: PathBuf,
    #[arg(long, value_enum, default_value_t = BackendKind::Scripted)]
    pub backend: BackendKind,
    /// Scripted backend rules.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Scripted clarification replies, overriding each item's hitl_answer.
    #[arg(long)]
    pub hitl_script: Option<PathBuf>,
    /// Where required files live; defaults to `files/` next to the
    /// benchmark, or its own directory.
    #[arg(long)]
    pub files_dir: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendKind {
    Scripted,
    External,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Strict,
    Relaxed,
}

impl From<Mode> for ScoreMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Strict => ScoreMode::Strict,
            Mode::Relaxed => ScoreMode::Relaxed,
        }
    }
}

/// Parses `args` (program name first) and runs the command. Progress
/// lines go to `progress`.
pub fn dispatch<I, S>(args: I, progress: &mut dyn FnMut(&str)) -> (CommandOutcome, bool)
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            return (CommandOutcome { code, text: e.render().to_string(), data: None }, false);
        }
    };
    let json = cli.json;
    (execute(cli, progress), json)
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn parse_key(s: &str) -> Result<(ToolId, Option<VersionLabel>), String> {
    match s.split_once('@') {
        Some((id, v)) => Ok((ToolId::new(id), Some(v.parse().map_err(|e| format!("{s}: {e}"))?))),
        None => Ok((ToolId::new(s), None)),
    }
}

fn open_backend(cli: &Cli) -> Result<Backend, String> {
    let backend = match &cli.data_dir {
        Some(d) => Backend::open(d),
        None => Backend::from_env(),
    }
    .map_err(|e| e.to_string())?;
    if !cli.no_builtin_tools {
        StubCatalog::standard().install(&backend.registry)?;
    }
    Ok(backend)
}

fn execute(cli: Cli, progress: &mut dyn FnMut(&str)) -> CommandOutcome {
    let r = match &cli.command {
        Command::Tool(c) => open_backend(&cli).and_then(|b| tool(c, &b)),
        Command::Workflow(c) => open_backend(&cli).and_then(|b| workflow(c, b, progress)),
        Command::Run(c) => open_backend(&cli).and_then(|b| run(c, &b)),
        Command::Pipeline(PipelineCmd::Build { config, simulate }) => {
            let linked = || open_backend(&cli);
            pipeline(config, *simulate, linked)
        }
        Command::Bench(c) => bench(c, progress),
    };
    r.unwrap_or_else(CommandOutcome::error)
}

fn tool(cmd: &ToolCmd, b: &Backend) -> Result<CommandOutcome, String> {
    match cmd {
        ToolCmd::Register { config } => {
            let (spec, version) = parse_tool_config(&read(config)?).map_err(|e| e.to_string())?;
            let v = b.registry.register_tool(spec, version).map_err(|e| e.to_string())?;
            Ok(CommandOutcome::ok(format!("registered {} ({:?})", v.key(), v.state), v))
        }
        ToolCmd::Publish { tool, simulate } => {
            let (id, version) = parse_key(tool)?;
            let version = version.ok_or("publish needs tool-id@version")?;
            let key = VersionKey { tool_id: id, version };
            let v = b.registry.get(&key).map_err(|e| e.to_string())?;
            let mut cfg = BuildConfig::new(&v.spec.repository, &format!("posy/{}:{}", key.tool_id, key.version));
            cfg.tool_id = Some(key.tool_id.to_string());
            cfg.version = Some(key.version.to_string());
            let built = build(cfg, *simulate).map_err(|(_, f)| f)?;
            if v.state == crate::registry::VersionState::Draft {
                b.registry.mark_built(&key, &built.image_ref).map_err(|e| e.to_string())?;
            }
            let v = b.registry.publish_version(&key, &built.summary).map_err(|e| e.to_string())?;
            Ok(CommandOutcome::ok(format!("published {} as {}", v.key(), built.image_ref), v))
        }
        ToolCmd::List => {
            let all = b.registry.list();
            let mut text = String::new();
            for v in &all {
                let _ = writeln!(text, "{}\t{:?}\t{}", v.key(), v.state, v.spec.title);
            }
            Ok(CommandOutcome::ok(text.trim_end().to_string(), all))
        }
        ToolCmd::Show { tool } => {
            let (id, version) = parse_key(tool)?;
            let sel = version.map_or(VersionSelector::LatestPublished, VersionSelector::Exact);
            let v = b.registry.lookup_version(&id, sel).map_err(|e| e.to_string())?;
            let text = serde_yaml::to_string(&v).map_err(|e| e.to_string())?;
            Ok(CommandOutcome::ok(text.trim_end().to_string(), v))
        }
    }
}

fn workflow(cmd: &WorkflowCmd, b: Backend, progress: &mut dyn FnMut(&str)) -> Result<CommandOutcome, String> {
    match cmd {
        WorkflowCmd::Validate { file } => {
            let graph = parse_workflow(&read(file)?).map_err(|e| e.to_string())?;
            match validate_graph(&graph, &b.registry) {
                Ok(plan) => {
                    let mut text = format!("workflow {} is valid\nplan {}\n", plan.workflow_id, plan.plan_id.to_hex());
                    for (i, n) in plan.order.iter().enumerate() {
                        let node = &plan.nodes[n];
                        let _ = writeln!(text, "{:>3}. {n} ({})", i + 1, node.version.key());
                    }
                    for bnd in &plan.bindings {
                        let _ = writeln!(text, "     {} -> {}", bnd.from, bnd.to);
                    }
                    Ok(CommandOutcome::ok(text.trim_end().to_string(), plan))
                }
                Err(violations) => {
                    let mut text = format!("workflow {} is invalid\n", graph.workflow_id);
                    for v in &violations {
                        let _ = writeln!(text, "  - {v}");
                    }
                    let data: Vec<String> = violations.iter().map(ToString::to_string).collect();
                    Ok(CommandOutcome::failed(text.trim_end().to_string(), json!({ "violations": data })))
                }
            }
        }
        WorkflowCmd::Run { file, executor } => {
            let graph = parse_workflow(&read(file)?).map_err(|e| e.to_string())?;
            let kind = match executor {
                Executor::Simulated => ExecutorKind::Simulated,
                Executor::Container => ExecutorKind::ExternalContainer,
            };
            let (tx, rx) = std::sync::mpsc::channel::<String>();
            let tx = std::sync::Mutex::new(tx);
            let observer = Arc::new(move |r: &crate::lifecycle::RunRecord| {
                let node = r.node_id.as_deref().unwrap_or("-");
                let _ = tx.lock().unwrap().send(format!("{node}\t{}\t{}", r.run_id, r.state));
            });
            let o = Orchestrator::new(Arc::new(b), StubCatalog::standard()).with_observer(observer);
            let report = std::thread::scope(|s| {
                let h = s.spawn(|| o.run_workflow(&graph, kind));
                while !h.is_finished() {
                    if let Ok(line) = rx.recv_timeout(std::time::Duration::from_millis(20)) {
                        progress(&line);
                    }
                }
                rx.try_iter().for_each(|line| progress(&line));
                h.join().expect("workflow thread")
            });
            let report = report.map_err(|e| e.to_string())?;
            let states = report.states();
            let mut text = format!("execution {} of {}\n", report.execution_id, report.workflow_id);
            for n in &report.order {
                let _ = writeln!(text, "  {n}\t{}\t{}", report.runs[n].run_id, states[n]);
            }
            let data = json!({
                "execution_id": report.execution_id,
                "workflow_id": report.workflow_id,
                "plan_id": report.plan_id,
                "order": report.order,
                "states": states,
                "runs": report.runs.iter().map(|(n, r)| (n.clone(), r.run_id.clone())).collect::<std::collections::BTreeMap<_, _>>(),
            });
            let text = text.trim_end().to_string();
            Ok(if report.all_finished() { CommandOutcome::ok(text, data) } else { CommandOutcome::failed(text, data) })
        }
        WorkflowCmd::Status { execution_id } => {
            let rec: ExecutionRecord = b.load_execution(execution_id).map_err(|e| e.to_string())?;
            let mut states = std::collections::BTreeMap::new();
            let mut text = format!("execution {} of {}\n", rec.execution_id, rec.workflow_id);
            for n in &rec.order {
                let run = b.load_run(&rec.runs[n]).map_err(|e| e.to_string())?;
                let _ = writeln!(text, "  {n}\t{}\t{}", run.run_id, run.state);
                states.insert(n.clone(), run.state);
            }
            Ok(CommandOutcome::ok(text.trim_end().to_string(), json!({ "execution": rec, "states": states })))
        }
    }
}

fn run(cmd: &RunCmd, b: &Backend) -> Result<CommandOutcome, String> {
    let id = match cmd {
        RunCmd::Status { run_id } | RunCmd::Logs { run_id } | RunCmd::Outputs { run_id, .. } => run_id,
    };
    let r = b.load_run(id).map_err(|e| e.to_string())?;
    match cmd {
        RunCmd::Status { .. } => {
            let mut text = format!("{} {} {}\n", r.run_id, r.tool, r.state);
            for t in &r.history {
                let ev = t.event.map_or("created".to_string(), |e| format!("{e:?}"));
                let _ = writeln!(text, "  {:>13} ms  {ev} -> {}", t.at.0, t.to);
            }
            if let Some(e) = &r.error {
                let _ = writeln!(text, "  error: {}", serde_json::to_string(e).unwrap_or_default());
            }
            Ok(CommandOutcome::ok(text.trim_end().to_string(), &r))
        }
        RunCmd::Logs { .. } => {
            let mut text = String::new();
            for t in &r.telemetry {
                if let crate::lifecycle::Telemetry::Log { level, message } = &t.entry {
                    let _ = writeln!(text, "{} {level} {message}", t.at.0);
                }
            }
            Ok(CommandOutcome::ok(text.trim_end().to_string(), &r.telemetry))
        }
        RunCmd::Outputs { out, .. } => {
            let mut text = String::new();
            for (port, d) in &r.outputs {
                let _ = writeln!(text, "{port}\t{}", d.to_hex());
                if let Some(dir) = out {
                    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
                    let bytes = b.store.get(d).map_err(|e| e.to_string())?;
                    std::fs::write(dir.join(port), bytes).map_err(|e| e.to_string())?;
                }
            }
            Ok(CommandOutcome::ok(text.trim_end().to_string(), &r.outputs))
        }
    }
}

fn build(cfg: BuildConfig, simulate: bool) -> Result<crate::pipeline::PipelineSuccess, (Vec<StageResult>, String)> {
    let mut set = if simulate { ExecutorSet::simulated() } else { ExecutorSet::shell() };
    run_pipeline(cfg, &mut set, &mut NullSink).map_err(|f| {
        let msg = f.to_string();
        (f.results, msg)
    })
}

fn stage_lines(results: &[StageResult]) -> String {
    let mut text = String::new();
    for r in results {
        let status = match &r.status {
            crate::pipeline::StageStatus::Success => "ok".to_string(),
            crate::pipeline::StageStatus::Failure(why) => format!("FAILED: {why}"),
        };
        let _ = writeln!(text, "  {:<20} {status}", r.stage.to_string());
    }
    text
}

fn pipeline(
    config: &Path,
    simulate: bool,
    linked: impl FnOnce() -> Result<Backend, String>,
) -> Result<CommandOutcome, String> {
    let text = read(config)?;
    let cfg: BuildConfig = serde_yaml::from_str(&text).map_err(|e| format!("{}: {e}", config.display()))?;
    cfg.check()?;
    let link = match (&cfg.tool_id, &cfg.version) {
        (Some(id), Some(v)) => Some(VersionKey {
            tool_id: ToolId::new(id.as_str()),
            version: v.parse().map_err(|e| format!("version: {e}"))?,
        }),
        _ => None,
    };
    match build(cfg, simulate) {
        Ok(ok) => {
            let mut text = format!("build succeeded: {}\n{}", ok.image_ref, stage_lines(&ok.results));
            let mut published = None;
            if let Some(key) = link {
                let b = linked()?;
                let v = b.registry.get(&key).map_err(|e| e.to_string())?;
                if v.state == crate::registry::VersionState::Draft {
                    b.registry.mark_built(&key, &ok.image_ref).map_err(|e| e.to_string())?;
                }
                let v = b.registry.publish_version(&key, &ok.summary).map_err(|e| e.to_string())?;
                let _ = writeln!(text, "published {}", v.key());
                published = Some(v.key().to_string());
            }
            let data = json!({ "image_ref": ok.image_ref, "summary": ok.summary, "stages": ok.results, "published": published });
            Ok(CommandOutcome::ok(text.trim_end().to_string(), data))
        }
        Err((results, msg)) => {
            let text = format!("{msg}\n{}", stage_lines(&results));
            Ok(CommandOutcome::failed(text.trim_end().to_string(), json!({ "error": msg, "stages": results })))
        }
    }
}

fn bench(cmd: &BenchCmd, progress: &mut dyn FnMut(&str)) -> Result<CommandOutcome, String> {
    match cmd {
        BenchCmd::Score { mode, file } => {
            let inputs = parse_score_inputs(&read(file)?).map_err(|e| e.to_string())?;
            let report = score_inputs(&inputs, (*mode).into()).map_err(|e| e.to_string())?;
            let mut text = String::new();
            for (i, s) in report.scores.iter().enumerate() {
                let _ = writeln!(text, "{:>4}  {s:.4}", i + 1);
            }
            match report.aggregate {
                Some(a) => {
                    let _ = write!(text, "{:?} score: {a:.2} over {} items", report.mode, report.scores.len());
                }
                None => text.push_str("no items"),
            }
            Ok(CommandOutcome::ok(text, report))
        }
        BenchCmd::Run(args) => {
            let items = load_benchmark(&args.file).map_err(|e| e.to_string())?;
            let backend: Box<dyn CompletionBackend> = match args.backend {
                BackendKind::Scripted => Box::new(match &args.script {
                    Some(p) => ScriptedBackend::load(p)?,
                    None => ScriptedBackend::heuristic(),
                }),
                BackendKind::External => Box::new(
                    ExternalBackend::from_env().ok_or("POSY_AGENT_ENDPOINT is not set for the external backend")?,
                ),
            };
            let hitl = match &args.hitl_script {
                Some(p) => Some(ScriptedHitl::from_yaml(&read(p)?)?),
                None => None,
            };
            let files_dir = args.files_dir.clone().unwrap_or_else(|| {
                let base = args.file.parent().map(Path::to_path_buf).unwrap_or_default();
                let sub = base.join("files");
                if sub.is_dir() {
                    sub
                } else {
                    base
                }
            });
            let report: BenchReport =
                run_benchmark(&items, &files_dir, backend.as_ref(), hitl.as_ref().map(|h| h as &dyn HitlResponder))
                    .map_err(|e| e.to_string())?;
            for (i, r) in report.items.iter().enumerate() {
                progress(&format!("item {}: strict {:.2} relaxed {:.2} judge {}", i + 1, r.strict, r.relaxed, r.judge));
            }
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
            let mut text = format!(
                "{} items  strict {}  relaxed {}  judge {}\n",
                report.summary.items,
                fmt(report.summary.strict),
                fmt(report.summary.relaxed),
                fmt(report.summary.judge)
            );
            for (t, s) in &report.by_topic {
                let _ = writeln!(text, "  {t}: strict {}  relaxed {}", fmt(s.strict), fmt(s.relaxed));
            }
            Ok(CommandOutcome::ok(text.trim_end().to_string(), report))
        }
    }
}
