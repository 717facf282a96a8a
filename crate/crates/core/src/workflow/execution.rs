//! Execution state of one plan instance: one run per node, readiness and
//! output propagation along edges.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ExecutionPlan;
use crate::clock::Timestamp;
use crate::lifecycle::{create_run, ErrorReport, LifecycleError, LifecycleEvent, RunRecord, RunState};
use crate::protocol::InputSource;
use crate::registry::{VersionKey, VersionResolver};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorkflowError {
    #[error("node `{node}`: {tool} is not published or not resolvable")]
    UnpublishedVersion { node: String, tool: VersionKey },
    #[error("node `{node}`: {source}")]
    Lifecycle { node: String, source: LifecycleError },
    #[error("node `{node}` is {state}, not FINISHED")]
    NotFinished { node: String, state: RunState },
    #[error("node `{node}` finished without output `{port}` needed downstream")]
    MissingOutput { node: String, port: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowExecution {
    pub plan: ExecutionPlan,
    pub runs: BTreeMap<String, RunRecord>,
    /// Edge-fed input ports still waiting for an upstream artifact.
    pub awaiting: BTreeMap<String, BTreeSet<String>>,
    ready: BTreeSet<String>,
    released: BTreeSet<String>,
}

/// Creates one Pending run per node. Nodes without edge-fed inputs start
/// out ready.
pub fn instantiate_execution(
    plan: &ExecutionPlan,
    resolver: &dyn VersionResolver,
    now: Timestamp,
    pending_timeout: Duration,
) -> Result<WorkflowExecution, WorkflowError> {
    let mut runs = BTreeMap::new();
    let mut awaiting = BTreeMap::new();
    for node_id in &plan.order {
        let planned = &plan.nodes[node_id];
        let key = planned.version.key();
        let version = match resolver.resolve(&key) {
            Some(v) if v.is_published() => v,
            _ => return Err(WorkflowError::UnpublishedVersion { node: node_id.clone(), tool: key }),
        };
        let mut run = create_run(&version, &planned.hyperparameters, planned.external.clone(), now, pending_timeout)
            .map_err(|source| WorkflowError::Lifecycle { node: node_id.clone(), source })?;
        run.plan_id = Some(plan.plan_id);
        run.node_id = Some(node_id.clone());
        runs.insert(node_id.clone(), run);
        let ports: BTreeSet<String> =
            plan.bindings.iter().filter(|b| &b.to.node == node_id).map(|b| b.to.port.clone()).collect();
        awaiting.insert(node_id.clone(), ports);
    }
    let ready: BTreeSet<String> = awaiting.iter().filter(|(_, p)| p.is_empty()).map(|(n, _)| n.clone()).collect();
    Ok(WorkflowExecution { plan: plan.clone(), runs, awaiting, released: ready.clone(), ready })
}

impl WorkflowExecution {
    fn in_plan_order(&self, set: &BTreeSet<String>) -> Vec<String> {
        self.plan.order.iter().filter(|n| set.contains(*n)).cloned().collect()
    }

    /// Ready nodes not yet handed out, in plan order.
    pub fn ready(&self) -> Vec<String> {
        self.in_plan_order(&self.ready)
    }

    /// Hands out all ready nodes, in plan order.
    pub fn take_ready(&mut self) -> Vec<String> {
        let out = self.ready();
        self.ready.clear();
        out
    }

    pub fn run(&self, node: &str) -> Option<&RunRecord> {
        self.runs.get(node)
    }

    pub fn run_mut(&mut self, node: &str) -> Option<&mut RunRecord> {
        self.runs.get_mut(node)
    }

    pub fn is_complete(&self) -> bool {
        self.runs.values().all(|r| r.state.is_terminal())
    }

    pub fn states(&self) -> BTreeMap<String, RunState> {
        self.runs.iter().map(|(n, r)| (n.clone(), r.state)).collect()
    }

    /// Binds the outputs of a finished node to its downstream inputs as
    /// UPLOADED_FILE descriptors. Returns the nodes that became ready.
    /// Propagating the same node twice changes nothing.
    pub fn propagate_outputs(&mut self, node: &str) -> Result<Vec<String>, WorkflowError> {
        let run = self.runs.get(node).ok_or_else(|| WorkflowError::UnknownNode(node.to_string()))?;
        if run.state != RunState::Finished {
            return Err(WorkflowError::NotFinished { node: node.to_string(), state: run.state });
        }
        let outgoing: Vec<_> = self.plan.bindings.iter().filter(|b| b.from.node == node).cloned().collect();
        let mut artifacts = Vec::with_capacity(outgoing.len());
        for b in &outgoing {
            match run.outputs.get(&b.from.port) {
                Some(d) => artifacts.push(*d),
                None => return Err(WorkflowError::MissingOutput { node: node.to_string(), port: b.from.port.clone() }),
            }
        }
        let mut touched = BTreeSet::new();
        for (b, artifact) in outgoing.iter().zip(artifacts) {
            let target = self.runs.get_mut(&b.to.node).expect("planned node");
            if target.state == RunState::Pending {
                target.inputs.insert(b.to.port.clone(), InputSource::UploadedFile { artifact });
            }
            self.awaiting.get_mut(&b.to.node).expect("planned node").remove(&b.to.port);
            touched.insert(b.to.node.clone());
        }
        let mut newly = BTreeSet::new();
        for t in touched {
            if self.awaiting[&t].is_empty()
                && self.runs[&t].state == RunState::Pending
                && self.released.insert(t.clone())
            {
                self.ready.insert(t.clone());
                newly.insert(t);
            }
        }
        Ok(self.in_plan_order(&newly))
    }

    /// Nodes reachable from `node` along edges.
    pub fn dependents(&self, node: &str) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![node.to_string()];
        while let Some(n) = stack.pop() {
            for b in self.plan.bindings.iter().filter(|b| b.from.node == n) {
                if seen.insert(b.to.node.clone()) {
                    stack.push(b.to.node.clone());
                }
            }
        }
        self.in_plan_order(&seen)
    }

    /// Moves every non-terminal transitive dependent of a failed node to
    /// Error with reason `upstream-failed`.
    pub fn fail_downstream(&mut self, node: &str, now: Timestamp) -> Vec<String> {
        let mut failed = Vec::new();
        for d in self.dependents(node) {
            let run = self.runs.get_mut(&d).expect("planned node");
            if run.state.is_terminal() {
                continue;
            }
            let report = ErrorReport::new("upstream-failed", format!("upstream node `{node}` did not finish"))
                .with_context("upstream", node);
            if run.apply_event(LifecycleEvent::Failed(report), now).is_ok() {
                self.ready.remove(&d);
                failed.push(d);
            }
        }
        failed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::Digest;
    use crate::lifecycle::DEFAULT_PENDING_TIMEOUT;
    use crate::registry::{DataKind, PortSchema, ToolId, ToolSpec, ToolType, ToolVersion, VersionLabel, VersionState};
    use crate::workflow::{validate_graph, WorkflowEdge, WorkflowGraph, WorkflowNode};

    fn tool(id: &str, ty: ToolType, inputs: &[&str], outputs: &[&str]) -> ToolVersion {
        let spec = ToolSpec {
            tool_id: ToolId::new(id),
            title: id.into(),
            tool_type: ty,
            description: String::new(),
            inputs: inputs.iter().map(|p| PortSchema::new(p, DataKind::Csv)).collect(),
            outputs: outputs.iter().map(|p| PortSchema::new(p, DataKind::Csv)).collect(),
            hyperparameters: vec![],
            repository: String::new(),
        };
        ToolVersion {
            tool_id: spec.tool_id.clone(),
            version: VersionLabel { major: 1, minor: 0, patch: 0 },
            spec,
            state: VersionState::Published,
            image_ref: Some("i".into()),
            release_summary_ref: Some(Digest::of(b"s")),
        }
    }

    fn setup() -> (BTreeMap<VersionKey, ToolVersion>, WorkflowGraph) {
        let tools = [
            tool("fetch", ToolType::Exporter, &[], &["dataset"]),
            tool("split", ToolType::Preprocessing, &["input"], &["train", "test"]),
            tool("enc", ToolType::DataTransformation, &["input"], &["encoded"]),
            tool("merge", ToolType::PostProcessing, &["left", "right"], &["output"]),
        ];
        let reg: BTreeMap<_, _> = tools.iter().map(|t| (t.key(), t.clone())).collect();
        let n =
            |id: &str, t: &str| WorkflowNode::new(id, &reg.keys().find(|k| k.tool_id.as_str() == t).unwrap().clone());
        let g = WorkflowGraph {
            workflow_id: "sm".into(),
            nodes: vec![n("f", "fetch"), n("s", "split"), n("e1", "enc"), n("e2", "enc"), n("m", "merge")],
            edges: vec![
                WorkflowEdge::new("f.dataset", "s.input"),
                WorkflowEdge::new("s.train", "e1.input"),
                WorkflowEdge::new("s.test", "e2.input"),
                WorkflowEdge::new("e1.encoded", "m.left"),
                WorkflowEdge::new("e2.encoded", "m.right"),
            ],
        };
        (reg, g)
    }

    fn finish(ex: &mut WorkflowExecution, node: &str, outputs: &[&str]) {
        let run = ex.run_mut(node).unwrap();
        for e in
            [LifecycleEvent::HandshakeCompleted, LifecycleEvent::StartCommandAccepted, LifecycleEvent::FunctionInvoked]
        {
            run.apply_event(e, Timestamp(1)).unwrap();
        }
        let outs = outputs.iter().map(|o| (o.to_string(), Digest::of(format!("{node}.{o}").as_bytes()))).collect();
        run.apply_event(LifecycleEvent::CompletedOk(outs), Timestamp(2)).unwrap();
    }

    #[test]
    fn readiness_and_idempotent_propagation() {
        let (reg, g) = setup();
        let plan = validate_graph(&g, &reg).unwrap();
        let mut ex = instantiate_execution(&plan, &reg, Timestamp(0), DEFAULT_PENDING_TIMEOUT).unwrap();
        assert_eq!(ex.runs.len(), 5);
        assert_eq!(ex.take_ready(), ["f"]);
        finish(&mut ex, "f", &["dataset"]);
        assert_eq!(ex.propagate_outputs("f").unwrap(), ["s"]);
        ex.take_ready();
        finish(&mut ex, "s", &["train", "test"]);
        assert_eq!(ex.propagate_outputs("s").unwrap(), ["e1", "e2"]);
        let snapshot = ex.clone();
        assert!(ex.propagate_outputs("s").unwrap().is_empty());
        assert_eq!(ex, snapshot);
        ex.take_ready();
        finish(&mut ex, "e1", &["encoded"]);
        assert!(ex.propagate_outputs("e1").unwrap().is_empty());
        assert!(ex.ready().is_empty());
        assert!(matches!(ex.run("m").unwrap().inputs["left"], InputSource::UploadedFile { .. }));
    }

    #[test]
    fn upstream_failure_cascades() {
        let (reg, g) = setup();
        let plan = validate_graph(&g, &reg).unwrap();
        let mut ex = instantiate_execution(&plan, &reg, Timestamp(0), DEFAULT_PENDING_TIMEOUT).unwrap();
        let failed = ex.fail_downstream("s", Timestamp(1));
        assert_eq!(failed, ["e1", "e2", "m"]);
        assert_eq!(ex.run("m").unwrap().error.as_ref().unwrap().reason, "upstream-failed");
        assert_eq!(ex.run("f").unwrap().state, RunState::Pending);
    }

    #[test]
    fn missing_output() {
        let (reg, g) = setup();
        let plan = validate_graph(&g, &reg).unwrap();
        let mut ex = instantiate_execution(&plan, &reg, Timestamp(0), DEFAULT_PENDING_TIMEOUT).unwrap();
        let run = ex.run_mut("f").unwrap();
        run.output_ports[0].required = false;
        for e in
            [LifecycleEvent::HandshakeCompleted, LifecycleEvent::StartCommandAccepted, LifecycleEvent::FunctionInvoked]
        {
            run.apply_event(e, Timestamp(1)).unwrap();
        }
        run.apply_event(LifecycleEvent::CompletedOk(BTreeMap::new()), Timestamp(2)).unwrap();
        assert!(matches!(ex.propagate_outputs("f"), Err(WorkflowError::MissingOutput { .. })));
    }
}
