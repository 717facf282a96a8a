//! Graph validation and deterministic ordering.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{PortRef, WorkflowGraph};
use crate::digest::Digest;
use crate::protocol::InputSource;
use crate::registry::{validate_hyperparameters, Assignment, DataKind, ToolType, ToolVersion, VersionResolver};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    DuplicateNode { node: String },
    InvalidNodeId { node: String },
    UnresolvableVersion { node: String, tool: String },
    UnpublishedVersion { node: String, tool: String },
    InvalidHyperparameters { node: String, reason: String },
    UnknownNode { edge: String, node: String },
    UnknownPort { edge: String, node: String, port: String },
    KindMismatch { edge: String, from_kind: DataKind, to_kind: DataKind },
    MultipleInbound { node: String, port: String },
    ExporterInbound { node: String },
    Cycle { nodes: Vec<String> },
    UncoveredInput { node: String, port: String },
    DoublyCovered { node: String, port: String },
    UnknownExternalPort { node: String, port: String },
    InvalidDescriptor { node: String, port: String, reason: String },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        use Violation::*;
        match self {
            DuplicateNode { node } => write!(f, "duplicate node `{node}`"),
            InvalidNodeId { node } => write!(f, "invalid node id `{node}`"),
            UnresolvableVersion { node, tool } => write!(f, "node `{node}`: cannot resolve {tool}"),
            UnpublishedVersion { node, tool } => write!(f, "node `{node}`: {tool} is not published"),
            InvalidHyperparameters { node, reason } => write!(f, "node `{node}`: {reason}"),
            UnknownNode { edge, node } => write!(f, "edge {edge}: unknown node `{node}`"),
            UnknownPort { edge, node, port } => write!(f, "edge {edge}: node `{node}` has no port `{port}`"),
            KindMismatch { edge, from_kind, to_kind } => {
                write!(f, "edge {edge}: {from_kind:?} output cannot feed {to_kind:?} input")
            }
            MultipleInbound { node, port } => write!(f, "{node}.{port} has more than one inbound edge"),
            ExporterInbound { node } => write!(f, "exporter `{node}` cannot have inbound edges"),
            Cycle { nodes } => write!(f, "cycle: {}", nodes.join(" -> ")),
            UncoveredInput { node, port } => write!(f, "required input {node}.{port} is not bound"),
            DoublyCovered { node, port } => write!(f, "{node}.{port} is bound by both an edge and an external input"),
            UnknownExternalPort { node, port } => write!(f, "external input for unknown port {node}.{port}"),
            InvalidDescriptor { node, port, reason } => write!(f, "{node}.{port}: {reason}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cycle detected: {}", cycle.join(" -> "))]
pub struct CycleDetected {
    pub cycle: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedNode {
    pub node_id: String,
    pub version: ToolVersion,
    pub hyperparameters: Assignment,
    pub external: BTreeMap<String, InputSource>,
}

/// Edge resolved to the artifact slot that carries it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub from: PortRef,
    pub to: PortRef,
    pub slot: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub plan_id: Digest,
    pub workflow_id: String,
    pub order: Vec<String>,
    pub nodes: BTreeMap<String, PlannedNode>,
    pub bindings: Vec<Binding>,
}

/// Kahn's algorithm with ties broken by ascending node id. Edges that
/// mention unknown nodes are ignored.
pub fn topological_order(graph: &WorkflowGraph) -> Result<Vec<String>, CycleDetected> {
    let ids: BTreeSet<&str> = graph.nodes.iter().map(|n| n.id.as_str()).collect();
    let mut indegree: BTreeMap<&str, usize> = ids.iter().map(|id| (*id, 0)).collect();
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut pred: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in &graph.edges {
        let (a, b) = (e.from.node.as_str(), e.to.node.as_str());
        if ids.contains(a) && ids.contains(b) {
            *indegree.get_mut(b).unwrap() += 1;
            succ.entry(a).or_default().push(b);
            pred.entry(b).or_default().push(a);
        }
    }
    let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
    let mut order = Vec::with_capacity(ids.len());
    while let Some(n) = ready.pop_first() {
        order.push(n.to_string());
        for s in succ.get(n).into_iter().flatten() {
            let d = indegree.get_mut(s).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.insert(s);
            }
        }
    }
    if order.len() == ids.len() {
        return Ok(order);
    }
    // Every remaining node has a remaining predecessor; walking them must
    // revisit a node.
    let remaining: BTreeSet<&str> = indegree.iter().filter(|(_, d)| **d > 0).map(|(n, _)| *n).collect();
    let mut walk: Vec<&str> = Vec::new();
    let mut cur = *remaining.iter().next().expect("nonempty");
    loop {
        if let Some(pos) = walk.iter().position(|n| *n == cur) {
            let mut cycle: Vec<String> = walk[pos..].iter().rev().map(|s| s.to_string()).collect();
            let min = cycle.iter().enumerate().min_by(|a, b| a.1.cmp(b.1)).map(|(i, _)| i).unwrap();
            cycle.rotate_left(min);
            return Err(CycleDetected { cycle });
        }
        walk.push(cur);
        cur = pred[cur].iter().copied().filter(|p| remaining.contains(p)).min().expect("remaining predecessor");
    }
}

/// Checks every structural, interface and executability rule and returns
/// either an execution plan or the full list of violations.
pub fn validate_graph(graph: &WorkflowGraph, resolver: &dyn VersionResolver) -> Result<ExecutionPlan, Vec<Violation>> {
    let mut v = Vec::new();
    let mut versions: BTreeMap<&str, ToolVersion> = BTreeMap::new();
    let mut validated: BTreeMap<&str, Assignment> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for node in &graph.nodes {
        if !seen.insert(node.id.as_str()) {
            v.push(Violation::DuplicateNode { node: node.id.clone() });
            continue;
        }
        if node.id.is_empty() || node.id.contains('.') {
            v.push(Violation::InvalidNodeId { node: node.id.clone() });
        }
        let key = node.key();
        let Some(tv) = resolver.resolve(&key) else {
            v.push(Violation::UnresolvableVersion { node: node.id.clone(), tool: key.to_string() });
            continue;
        };
        if !tv.is_published() {
            v.push(Violation::UnpublishedVersion { node: node.id.clone(), tool: key.to_string() });
        }
        match validate_hyperparameters(&tv.spec, &node.hyperparameters) {
            Ok(a) => {
                validated.insert(&node.id, a);
            }
            Err(e) => v.push(Violation::InvalidHyperparameters { node: node.id.clone(), reason: e.to_string() }),
        }
        versions.insert(&node.id, tv);
    }

    let mut inbound: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for e in &graph.edges {
        let label = format!("{} -> {}", e.from, e.to);
        *inbound.entry((e.to.node.as_str(), e.to.port.as_str())).or_default() += 1;
        let src = versions.get(e.from.node.as_str());
        let dst = versions.get(e.to.node.as_str());
        for (r, known) in [(&e.from, src.is_some()), (&e.to, dst.is_some())] {
            if !known && !seen.contains(r.node.as_str()) {
                v.push(Violation::UnknownNode { edge: label.clone(), node: r.node.clone() });
            }
        }
        if let Some(tv) = dst {
            if tv.spec.tool_type == ToolType::Exporter {
                v.push(Violation::ExporterInbound { node: e.to.node.clone() });
            }
        }
        let out_kind = src.and_then(|tv| match tv.spec.output(&e.from.port) {
            Some(p) => Some(p.kind),
            None => {
                v.push(Violation::UnknownPort {
                    edge: label.clone(),
                    node: e.from.node.clone(),
                    port: e.from.port.clone(),
                });
                None
            }
        });
        let in_kind = dst.and_then(|tv| match tv.spec.input(&e.to.port) {
            Some(p) => Some(p.kind),
            None => {
                v.push(Violation::UnknownPort {
                    edge: label.clone(),
                    node: e.to.node.clone(),
                    port: e.to.port.clone(),
                });
                None
            }
        });
        if let (Some(a), Some(b)) = (out_kind, in_kind) {
            if !a.compatible_with(b) {
                v.push(Violation::KindMismatch { edge: label.clone(), from_kind: a, to_kind: b });
            }
        }
    }
    // Exporter violations are reported once per node.
    let mut exporter_seen = BTreeSet::new();
    v.retain(|x| match x {
        Violation::ExporterInbound { node } => exporter_seen.insert(node.clone()),
        _ => true,
    });

    let mut checked = BTreeSet::new();
    for node in &graph.nodes {
        if !checked.insert(node.id.as_str()) {
            continue;
        }
        let Some(tv) = versions.get(node.id.as_str()) else { continue };
        for (port, src) in &node.inputs {
            if tv.spec.input(port).is_none() {
                v.push(Violation::UnknownExternalPort { node: node.id.clone(), port: port.clone() });
            }
            if let Err(reason) = src.check() {
                v.push(Violation::InvalidDescriptor { node: node.id.clone(), port: port.clone(), reason });
            }
        }
        for p in &tv.spec.inputs {
            let edges = inbound.get(&(node.id.as_str(), p.name.as_str())).copied().unwrap_or(0);
            let external = node.inputs.contains_key(&p.name);
            if edges > 1 {
                v.push(Violation::MultipleInbound { node: node.id.clone(), port: p.name.clone() });
            } else if edges == 1 && external {
                v.push(Violation::DoublyCovered { node: node.id.clone(), port: p.name.clone() });
            } else if edges == 0 && !external && p.required {
                v.push(Violation::UncoveredInput { node: node.id.clone(), port: p.name.clone() });
            }
        }
    }

    let order = match topological_order(graph) {
        Ok(o) => o,
        Err(c) => {
            v.push(Violation::Cycle { nodes: c.cycle });
            Vec::new()
        }
    };
    if !v.is_empty() {
        return Err(v);
    }

    let mut nodes = BTreeMap::new();
    for node in &graph.nodes {
        nodes.insert(
            node.id.clone(),
            PlannedNode {
                node_id: node.id.clone(),
                version: versions[node.id.as_str()].clone(),
                hyperparameters: validated[node.id.as_str()].clone(),
                external: node.inputs.clone(),
            },
        );
    }
    let mut bindings: Vec<Binding> = graph
        .edges
        .iter()
        .map(|e| Binding { from: e.from.clone(), to: e.to.clone(), slot: e.from.to_string() })
        .collect();
    bindings.sort_by(|a, b| (&a.from, &a.to).cmp(&(&b.from, &b.to)));
    let id_material = (
        &graph.workflow_id,
        &order,
        nodes
            .values()
            .map(|n| (&n.node_id, n.version.content_hash(), &n.hyperparameters, &n.external))
            .collect::<Vec<_>>(),
        &bindings,
    );
    Ok(ExecutionPlan {
        plan_id: Digest::of_json(&id_material),
        workflow_id: graph.workflow_id.clone(),
        order,
        nodes,
        bindings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{PortSchema, ToolId, ToolSpec, VersionKey, VersionLabel, VersionState};
    use crate::workflow::{WorkflowEdge, WorkflowNode};

    fn tool(id: &str, ty: ToolType, inputs: Vec<PortSchema>, outputs: Vec<PortSchema>) -> ToolVersion {
        let spec = ToolSpec {
            tool_id: ToolId::new(id),
            title: id.into(),
            tool_type: ty,
            description: String::new(),
            inputs,
            outputs,
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

    fn registry() -> BTreeMap<VersionKey, ToolVersion> {
        let mut r = BTreeMap::new();
        for t in [
            tool("src", ToolType::Exporter, vec![], vec![PortSchema::new("out", DataKind::Csv)]),
            tool(
                "mid",
                ToolType::Analysis,
                vec![PortSchema::new("in", DataKind::Csv)],
                vec![PortSchema::new("out", DataKind::Csv), PortSchema::new("img", DataKind::Image)],
            ),
        ] {
            r.insert(t.key(), t);
        }
        r
    }

    fn node(id: &str, tool: &str) -> WorkflowNode {
        WorkflowNode::new(
            id,
            &VersionKey { tool_id: ToolId::new(tool), version: VersionLabel { major: 1, minor: 0, patch: 0 } },
        )
    }

    fn graph(nodes: Vec<WorkflowNode>, edges: &[(&str, &str)]) -> WorkflowGraph {
        WorkflowGraph {
            workflow_id: "w".into(),
            nodes,
            edges: edges.iter().map(|(a, b)| WorkflowEdge::new(a, b)).collect(),
        }
    }

    #[test]
    fn diamond_order() {
        let g = graph(
            vec![node("d", "mid"), node("c", "mid"), node("b", "mid"), node("a", "mid")],
            &[("a.out", "b.in"), ("a.out", "c.in"), ("b.out", "d.in"), ("c.out", "d.in")],
        );
        assert_eq!(topological_order(&g).unwrap(), ["a", "b", "c", "d"]);
    }

    #[test]
    fn empty_graph() {
        assert!(topological_order(&graph(vec![], &[])).unwrap().is_empty());
    }

    #[test]
    fn two_node_cycle() {
        let g = graph(vec![node("b", "mid"), node("a", "mid")], &[("a.out", "b.in"), ("b.out", "a.in")]);
        assert_eq!(topological_order(&g), Err(CycleDetected { cycle: vec!["a".into(), "b".into()] }));
        let errs = validate_graph(&g, &registry()).unwrap_err();
        assert!(errs.contains(&Violation::Cycle { nodes: vec!["a".into(), "b".into()] }));
    }

    #[test]
    fn cycle_witness_is_a_cycle() {
        let g = graph(
            vec![node("a", "mid"), node("b", "mid"), node("c", "mid"), node("d", "mid")],
            &[("a.out", "b.in"), ("b.out", "c.in"), ("c.out", "d.in"), ("d.out", "b.in")],
        );
        let c = topological_order(&g).unwrap_err().cycle;
        assert_eq!(c, ["b", "c", "d"]);
    }

    #[test]
    fn kind_mismatch_and_all_violations() {
        let g =
            graph(vec![node("s", "src"), node("m", "mid"), node("n", "mid")], &[("m.img", "n.in"), ("n.out", "s.x")]);
        let errs = validate_graph(&g, &registry()).unwrap_err();
        assert!(errs
            .iter()
            .any(|e| matches!(e, Violation::KindMismatch { from_kind: DataKind::Image, to_kind: DataKind::Csv, .. })));
        assert!(errs.iter().any(|e| matches!(e, Violation::ExporterInbound { .. })));
        assert!(errs.iter().any(|e| matches!(e, Violation::UncoveredInput { node, .. } if node == "m")));
        assert!(errs.iter().any(|e| matches!(e, Violation::UnknownPort { port, .. } if port == "x")));
    }

    #[test]
    fn linear_plan() {
        let g = graph(vec![node("fetch", "src"), node("encode", "mid")], &[("fetch.out", "encode.in")]);
        let plan = validate_graph(&g, &registry()).unwrap();
        assert_eq!(plan.order, ["fetch", "encode"]);
        assert_eq!(plan.bindings[0].slot, "fetch.out");
        assert_eq!(validate_graph(&g, &registry()).unwrap().plan_id, plan.plan_id);
    }

    #[test]
    fn unresolvable_version() {
        let g = graph(vec![node("x", "nope")], &[]);
        assert!(matches!(validate_graph(&g, &registry()).unwrap_err()[0], Violation::UnresolvableVersion { .. }));
    }

    #[test]
    fn double_coverage() {
        let mut m = node("m", "mid");
        m.inputs.insert("in".into(), InputSource::inline(b"a\n"));
        let g = graph(vec![node("s", "src"), m], &[("s.out", "m.in")]);
        assert_eq!(
            validate_graph(&g, &registry()).unwrap_err(),
            vec![Violation::DoublyCovered { node: "m".into(), port: "in".into() }]
        );
    }
}
