//! The ten evaluation workflows over the stub tools, as twelve executions
//! (the two single-step workflows run with two configurations each).

use serde::{Deserialize, Serialize};

use super::stubs::{iris_csv, uci_dataset};
use crate::protocol::InputSource;
use crate::registry::{HyperValue, ToolId, VersionLabel};
use crate::workflow::{WorkflowEdge, WorkflowGraph, WorkflowNode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    SingleStep,
    Linear,
    Branching,
    Comparative,
    SplitAndMerge,
}

impl Pattern {
    pub const ALL: [Pattern; 5] =
        [Pattern::SingleStep, Pattern::Linear, Pattern::Branching, Pattern::Comparative, Pattern::SplitAndMerge];
}

#[derive(Debug, Clone)]
pub struct PatternExecution {
    /// Execution number, 1 to 12.
    pub execution: u32,
    pub name: &'static str,
    pub pattern: Pattern,
    pub graph: WorkflowGraph,
}

fn node(id: &str, tool: &str, hp: &[(&str, HyperValue)]) -> WorkflowNode {
    WorkflowNode {
        id: id.into(),
        tool_id: ToolId::new(tool),
        version: VersionLabel { major: 1, minor: 0, patch: 0 },
        hyperparameters: hp.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        inputs: Default::default(),
    }
}

fn with_input(mut n: WorkflowNode, port: &str, bytes: &[u8]) -> WorkflowNode {
    n.inputs.insert(port.into(), InputSource::inline(bytes));
    n
}

fn graph(id: &str, nodes: Vec<WorkflowNode>, edges: &[(&str, &str)]) -> WorkflowGraph {
    WorkflowGraph { workflow_id: id.into(), nodes, edges: edges.iter().map(|(f, t)| WorkflowEdge::new(f, t)).collect() }
}

fn fetch(id: i64) -> WorkflowNode {
    node("fetch", "uci-fetch", &[("dataset_id", id.into())])
}

fn encode(id: &str) -> WorkflowNode {
    node(id, "one-hot-encoding", &[("columns", "".into()), ("drop_first", false.into()), ("prefix_sep", "__".into())])
}

fn split(id: &str) -> WorkflowNode {
    node(
        id,
        "train-test-split",
        &[("shuffle", true.into()), ("test_size", 0.25.into()), ("random_state", 42i64.into())],
    )
}

fn agglomerative(id: &str) -> WorkflowNode {
    node(
        id,
        "agglomerative-clustering",
        &[
            ("linkage", "ward".into()),
            ("standardize", true.into()),
            ("metric", "euclidean".into()),
            ("n_clusters", 2i64.into()),
        ],
    )
}

fn birch(id: &str) -> WorkflowNode {
    node(id, "birch", &[("threshold", 0.5.into()), ("branching_factor", 50i64.into()), ("n_clusters", 3i64.into())])
}

fn gmm(id: &str) -> WorkflowNode {
    node(
        id,
        "gaussian-mixture-model",
        &[
            ("n_components", 3i64.into()),
            ("tol", 0.001.into()),
            ("max_iter", 100i64.into()),
            ("random_state", 42i64.into()),
        ],
    )
}

fn merge(id: &str, mode: &str) -> WorkflowNode {
    node(id, "branch-merge-aggregator", &[("mode", mode.into()), ("key", "".into()), ("how", "inner".into())])
}

fn benchmark(id: &str) -> WorkflowNode {
    node(
        id,
        "comparative-clustering-benchmark",
        &[("id_column", "index".into()), ("truth_label_column", "label".into()), ("sort_by", "silhouette".into())],
    )
}

/// The split-and-merge workflow: fetch, split, encode both partitions,
/// concatenate rows, then cluster.
pub fn split_and_merge() -> WorkflowGraph {
    graph(
        "split-and-merge",
        vec![
            fetch(17),
            split("split"),
            encode("encode_train"),
            encode("encode_test"),
            merge("merge", "concat_rows"),
            agglomerative("cluster"),
        ],
        &[
            ("fetch.dataset", "split.input"),
            ("split.train", "encode_train.input"),
            ("split.test", "encode_test.input"),
            ("encode_train.encoded", "merge.left"),
            ("encode_test.encoded", "merge.right"),
            ("merge.output", "cluster.features"),
        ],
    )
}

pub fn pattern_executions() -> Vec<PatternExecution> {
    let iris = iris_csv();
    let uci17 = uci_dataset(17).to_csv();
    let e = |execution, name, pattern, graph| PatternExecution { execution, name, pattern, graph };
    vec![
        e(1, "UCI dataset fetch", Pattern::SingleStep, graph("uci-dataset-fetch", vec![fetch(17)], &[])),
        e(2, "UCI dataset fetch", Pattern::SingleStep, graph("uci-dataset-fetch", vec![fetch(107)], &[])),
        e(
            3,
            "CSV to Train-Test-Split",
            Pattern::SingleStep,
            graph("csv-train-test-split", vec![with_input(split("split"), "input", &iris)], &[]),
        ),
        e(
            4,
            "CSV to Train-Test-Split",
            Pattern::SingleStep,
            graph("csv-train-test-split", vec![with_input(split("split"), "input", &uci17)], &[]),
        ),
        e(
            5,
            "Fetch-encode workflow",
            Pattern::Linear,
            graph("fetch-encode", vec![fetch(17), encode("encode")], &[("fetch.dataset", "encode.input")]),
        ),
        e(
            6,
            "CSV encode to cluster",
            Pattern::Linear,
            graph(
                "csv-encode-cluster",
                vec![with_input(encode("encode"), "input", &iris), agglomerative("cluster")],
                &[("encode.encoded", "cluster.features")],
            ),
        ),
        e(
            7,
            "Shared preprocessing with clustering branches",
            Pattern::Branching,
            graph(
                "shared-preprocessing-clustering-branches",
                vec![fetch(17), encode("encode"), birch("birch"), gmm("gmm")],
                &[
                    ("fetch.dataset", "encode.input"),
                    ("encode.encoded", "birch.features"),
                    ("encode.encoded", "gmm.features"),
                ],
            ),
        ),
        e(
            8,
            "Shared input with analysis branches",
            Pattern::Branching,
            graph(
                "shared-input-analysis-branches",
                vec![fetch(17), encode("encode"), agglomerative("cluster"), birch("birch")],
                &[
                    ("fetch.dataset", "encode.input"),
                    ("encode.encoded", "cluster.features"),
                    ("encode.encoded", "birch.features"),
                ],
            ),
        ),
        e(
            9,
            "Multi-model clustering comparison",
            Pattern::Comparative,
            graph(
                "multi-model-clustering-comparison",
                vec![fetch(17), encode("encode"), gmm("gmm"), benchmark("benchmark")],
                &[
                    ("fetch.dataset", "encode.input"),
                    ("encode.encoded", "gmm.features"),
                    ("encode.encoded", "benchmark.features"),
                    ("gmm.labels", "benchmark.predictions"),
                ],
            ),
        ),
        e(
            10,
            "Comparative clustering benchmark",
            Pattern::Comparative,
            graph(
                "comparative-clustering-benchmark",
                vec![fetch(17), encode("encode"), birch("birch"), gmm("gmm"), benchmark("benchmark")],
                &[
                    ("fetch.dataset", "encode.input"),
                    ("encode.encoded", "birch.features"),
                    ("encode.encoded", "gmm.features"),
                    ("encode.encoded", "benchmark.features"),
                    ("birch.labels", "benchmark.predictions"),
                    ("gmm.labels", "benchmark.ground_truth"),
                ],
            ),
        ),
        e(11, "Split-and-merge workflow", Pattern::SplitAndMerge, split_and_merge()),
        e(
            12,
            "Sample split-and-merge workflow",
            Pattern::SplitAndMerge,
            graph(
                "sample-split-and-merge",
                vec![
                    fetch(17),
                    encode("encode"),
                    split("split"),
                    gmm("gmm_test"),
                    gmm("gmm_train"),
                    merge("merge", "concat_columns"),
                ],
                &[
                    ("fetch.dataset", "encode.input"),
                    ("encode.encoded", "split.input"),
                    ("split.test", "gmm_test.features"),
                    ("split.train", "gmm_train.features"),
                    ("gmm_test.labels", "merge.left"),
                    ("gmm_train.labels", "merge.right"),
                ],
            ),
        ),
    ]
}
