//! Typed workflow DAGs.

pub mod execution;
pub mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::protocol::InputSource;
use crate::registry::{Assignment, ToolId, VersionKey, VersionLabel};

pub use execution::{instantiate_execution, WorkflowError, WorkflowExecution};
pub use validate::{topological_order, validate_graph, Binding, CycleDetected, ExecutionPlan, PlannedNode, Violation};

/// `node.port` reference.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortRef {
    pub node: String,
    pub port: String,
}

impl PortRef {
    pub fn new(node: &str, port: &str) -> Self {
        PortRef { node: node.to_string(), port: port.to_string() }
    }
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.node, self.port)
    }
}

impl FromStr for PortRef {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('.') {
            Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok(PortRef::new(n, p)),
            _ => Err(format!("expected `node.port`, got `{s}`")),
        }
    }
}

impl Serialize for PortRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PortRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowNode {
    pub id: String,
    pub tool_id: ToolId,
    pub version: VersionLabel,
    #[serde(default)]
    pub hyperparameters: Assignment,
    /// Inputs fed from outside the graph.
    #[serde(default)]
    pub inputs: BTreeMap<String, InputSource>,
}

impl WorkflowNode {
    pub fn new(id: &str, tool: &VersionKey) -> Self {
        WorkflowNode {
            id: id.to_string(),
            tool_id: tool.tool_id.clone(),
            version: tool.version,
            hyperparameters: Assignment::new(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn key(&self) -> VersionKey {
        VersionKey { tool_id: self.tool_id.clone(), version: self.version }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowEdge {
    pub from: PortRef,
    pub to: PortRef,
}

impl WorkflowEdge {
    pub fn new(from: &str, to: &str) -> Self {
        WorkflowEdge { from: from.parse().expect("node.port"), to: to.parse().expect("node.port") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowGraph {
    pub workflow_id: String,
    #[serde(default)]
    pub nodes: Vec<WorkflowNode>,
    #[serde(default)]
    pub edges: Vec<WorkflowEdge>,
}

#[derive(Debug, thiserror::Error)]
#[error("workflow file: {0}")]
pub struct WorkflowParseError(pub String);

pub fn parse_workflow(text: &str) -> Result<WorkflowGraph, WorkflowParseError> {
    serde_yaml::from_str(text).map_err(|e| WorkflowParseError(e.to_string()))
}

pub fn render_workflow(graph: &WorkflowGraph) -> String {
    serde_yaml::to_string(graph).expect("workflow serializes")
}
