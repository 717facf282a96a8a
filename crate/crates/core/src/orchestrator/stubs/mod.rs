//! Deterministic in-process stand-ins for the evaluation tools. Each stub
//! is a pure function of its hyperparameters and input bytes.

pub mod algo;
pub mod plot;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pipeline::{run_pipeline, BuildConfig, ExecutorSet, NullSink};
use crate::registry::{
    Assignment, DataKind, HyperValue, HyperparameterDef, PortSchema, Registry, RegistryError, ToolId, ToolSpec,
    ToolType, ToolVersion, ValueKind, VersionKey, VersionLabel, VersionState,
};
use algo::Matrix;

pub type Files = BTreeMap<String, Vec<u8>>;
pub type StubFn = Arc<dyn Fn(&Assignment, &Files) -> Result<Files, String> + Send + Sync>;

#[derive(Clone)]
pub struct StubTool {
    pub spec: ToolSpec,
    pub version: VersionLabel,
    pub run: StubFn,
}

impl StubTool {
    pub fn new(
        spec: ToolSpec,
        run: impl Fn(&Assignment, &Files) -> Result<Files, String> + Send + Sync + 'static,
    ) -> Self {
        StubTool { spec, version: VersionLabel { major: 1, minor: 0, patch: 0 }, run: Arc::new(run) }
    }

    pub fn key(&self) -> VersionKey {
        VersionKey { tool_id: self.spec.tool_id.clone(), version: self.version }
    }
}

#[derive(Clone, Default)]
pub struct StubCatalog {
    tools: BTreeMap<ToolId, StubTool>,
}

impl StubCatalog {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The eight tools used by the workflow pattern fixtures.
    pub fn standard() -> Self {
        let mut c = Self::empty();
        for t in [
            uci_fetch(),
            one_hot_encoding(),
            agglomerative_clustering(),
            birch(),
            gaussian_mixture(),
            train_test_split(),
            branch_merge_aggregator(),
            comparative_benchmark(),
        ] {
            c.insert(t);
        }
        c
    }

    pub fn insert(&mut self, tool: StubTool) {
        self.tools.insert(tool.spec.tool_id.clone(), tool);
    }

    pub fn get(&self, id: &ToolId) -> Option<&StubTool> {
        self.tools.get(id)
    }

    pub fn tools(&self) -> impl Iterator<Item = &StubTool> {
        self.tools.values()
    }

    /// Registers and publishes every stub through the simulated build
    /// pipeline. Versions already published are left alone.
    pub fn install(&self, registry: &Registry) -> Result<Vec<ToolVersion>, String> {
        let mut out = Vec::new();
        for t in self.tools.values() {
            out.push(publish_stub(registry, t)?);
        }
        Ok(out)
    }
}

fn publish_stub(registry: &Registry, t: &StubTool) -> Result<ToolVersion, String> {
    let key = t.key();
    let existing = match registry.get(&key) {
        Ok(v) => Some(v),
        Err(RegistryError::NotFound { .. }) => None,
        Err(e) => return Err(e.to_string()),
    };
    let state = match existing {
        Some(v) if v.state == VersionState::Published => return Ok(v),
        Some(v) => v.state,
        None => registry.register_tool(t.spec.clone(), t.version).map_err(|e| e.to_string())?.state,
    };
    let mut cfg =
        BuildConfig::new(&format!("stub://{}", key.tool_id), &format!("posy/{}:{}", key.tool_id, key.version));
    cfg.tool_id = Some(key.tool_id.to_string());
    cfg.version = Some(key.version.to_string());
    let built = run_pipeline(cfg, &mut ExecutorSet::simulated(), &mut NullSink).map_err(|e| e.to_string())?;
    if state == VersionState::Draft {
        registry.mark_built(&key, &built.image_ref).map_err(|e| e.to_string())?;
    }
    registry.publish_version(&key, &built.summary).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- tables

/// A CSV table held as strings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Table { headers: headers.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, String> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
        let headers = r.headers().map_err(|e| e.to_string())?.iter().map(str::to_string).collect::<Vec<_>>();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| e.to_string())?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Table { headers, rows })
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn is_numeric_column(&self, j: usize) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.get(j).is_some_and(|v| v.trim().parse::<f64>().is_ok()))
    }

    /// All-numeric columns not listed in `exclude`, as a row-major matrix.
    pub fn numeric(&self, exclude: &[&str]) -> Result<(Vec<String>, Matrix), String> {
        let cols: Vec<usize> = (0..self.headers.len())
            .filter(|&j| !exclude.contains(&self.headers[j].as_str()) && self.is_numeric_column(j))
            .collect();
        if cols.is_empty() {
            return Err("no numeric feature columns".into());
        }
        let m =
            self.rows.iter().map(|r| cols.iter().map(|&j| r[j].trim().parse().expect("numeric")).collect()).collect();
        Ok((cols.iter().map(|&j| self.headers[j].clone()).collect(), m))
    }

    /// Values of `index`, or row numbers when the column is absent.
    pub fn ids(&self) -> Vec<String> {
        match self.column("index") {
            Some(j) => self.rows.iter().map(|r| r[j].clone()).collect(),
            None => (0..self.rows.len()).map(|i| i.to_string()).collect(),
        }
    }
}

pub fn num(x: f64) -> String {
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

fn csv_input(files: &Files, port: &str) -> Result<Table, String> {
    let bytes = files.get(port).ok_or_else(|| format!("input `{port}` missing"))?;
    Table::parse(bytes).map_err(|e| format!("input `{port}`: {e}"))
}

fn int(a: &Assignment, name: &str) -> i64 {
    match a.get(name) {
        Some(HyperValue::Integer(i)) => *i,
        Some(HyperValue::Real(r)) => *r as i64,
        _ => 0,
    }
}

fn real(a: &Assignment, name: &str) -> f64 {
    match a.get(name) {
        Some(HyperValue::Real(r)) => *r,
        Some(HyperValue::Integer(i)) => *i as f64,
        _ => 0.0,
    }
}

fn flag(a: &Assignment, name: &str) -> bool {
    matches!(a.get(name), Some(HyperValue::Boolean(true)))
}

fn text<'a>(a: &'a Assignment, name: &str) -> &'a str {
    match a.get(name) {
        Some(HyperValue::Text(s)) => s,
        _ => "",
    }
}

fn spec(
    id: &str,
    title: &str,
    ty: ToolType,
    desc: &str,
    inputs: Vec<PortSchema>,
    outputs: Vec<PortSchema>,
    hp: Vec<HyperparameterDef>,
) -> ToolSpec {
    ToolSpec {
        tool_id: ToolId::new(id),
        title: title.into(),
        tool_type: ty,
        description: desc.into(),
        inputs,
        outputs,
        hyperparameters: hp,
        repository: format!("stub://{id}"),
    }
}

fn files(pairs: Vec<(&str, Vec<u8>)>) -> Files {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn labels_table(ids: &[String], labels: &[usize]) -> Table {
    let mut t = Table::new(&["index", "label"]);
    t.rows = ids.iter().zip(labels).map(|(i, l)| vec![i.clone(), l.to_string()]).collect();
    t
}

fn html(title: &str, rows: &[(String, String)]) -> Vec<u8> {
    let mut s =
        format!("<!doctype html>\n<html><head><title>{title}</title></head><body>\n<h1>{title}</h1>\n<table>\n");
    for (k, v) in rows {
        let _ = writeln!(s, "<tr><th>{k}</th><td>{v}</td></tr>");
    }
    s.push_str("</table>\n</body></html>\n");
    s.into_bytes()
}

/// Columns named `index` or `label` identify rows and are never features.
const ID_COLUMNS: [&str; 2] = ["index", "label"];

// ---------------------------------------------------------------- datasets

/// Synthetic table for a dataset id: an `index`, four numeric features,
/// one categorical `group` column and a three-class `label`.
pub fn uci_dataset(dataset_id: i64) -> Table {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_id as u64);
    let n = 90 + (dataset_id.rem_euclid(4) as usize) * 10;
    let mut t = Table::new(&["index", "f1", "f2", "f3", "f4", "group", "label"]);
    let groups = ["low", "mid", "high"];
    for i in 0..n {
        let class = i % 3;
        let mut row = vec![i.to_string()];
        for j in 0..4 {
            let noise: f64 = (0..3).map(|_| rng.gen_range(-0.5..0.5)).sum();
            row.push(format!("{:.3}", class as f64 * 1.5 + j as f64 * 0.3 + noise));
        }
        let drift = usize::from(rng.gen_range(0..4) == 0);
        row.push(groups[(class + drift) % 3].to_string());
        row.push(class.to_string());
        t.rows.push(row);
    }
    t
}

/// Iris-shaped table: four measurements and a `variety` column.
pub fn iris_csv() -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(150);
    let species =
        [("Setosa", [5.0, 3.4, 1.5, 0.2]), ("Versicolor", [5.9, 2.8, 4.3, 1.3]), ("Virginica", [6.6, 3.0, 5.6, 2.0])];
    let mut t = Table::new(&["sepal.length", "sepal.width", "petal.length", "petal.width", "variety"]);
    for (name, centre) in species {
        for _ in 0..50 {
            let mut row: Vec<String> = centre
                .iter()
                .map(|c| {
                    let noise: f64 = (0..3).map(|_| rng.gen_range(-0.25..0.25)).sum();
                    format!("{:.1}", (c + noise).max(0.1))
                })
                .collect();
            row.push(name.to_string());
            t.rows.push(row);
        }
    }
    t.to_csv()
}

// ---------------------------------------------------------------- tools

pub fn uci_fetch() -> StubTool {
    let s = spec(
        "uci-fetch",
        "UciFetch",
        ToolType::Exporter,
        "Fetch a dataset from the UCI machine learning repository by id and export it as CSV.",
        vec![],
        vec![PortSchema::new("dataset", DataKind::Csv), PortSchema::new("report", DataKind::Text)],
        vec![HyperparameterDef::new("dataset_id", ValueKind::Integer).with_default(17i64).with_range(1.0, 1e6)],
    );
    StubTool::new(s, |a, _| {
        let id = int(a, "dataset_id");
        let t = uci_dataset(id);
        let report = format!("dataset {id}: {} rows, {} columns\n", t.rows.len(), t.headers.len());
        Ok(files(vec![("dataset", t.to_csv()), ("report", report.into_bytes())]))
    })
}

pub fn one_hot_encoding() -> StubTool {
    let s = spec(
        "one-hot-encoding",
        "OneHotEncoding",
        ToolType::Preprocessing,
        "One-hot encode categorical columns of a CSV table into indicator columns.",
        vec![PortSchema::new("input", DataKind::Csv)],
        vec![PortSchema::new("encoded", DataKind::Csv)],
        vec![
            HyperparameterDef::new("columns", ValueKind::Text).with_default(""),
            HyperparameterDef::new("drop_first", ValueKind::Boolean).with_default(false),
            HyperparameterDef::new("bool_to_number", ValueKind::Boolean).with_default(true),
            HyperparameterDef::new("dummy_na", ValueKind::Boolean).with_default(false),
            HyperparameterDef::new("prefix_sep", ValueKind::Text).with_default("__"),
            HyperparameterDef::new("keep_original", ValueKind::Boolean).with_default(false),
        ],
    );
    StubTool::new(s, |a, f| Ok(files(vec![("encoded", encode(&csv_input(f, "input")?, a)?.to_csv())])))
}

fn encode(t: &Table, a: &Assignment) -> Result<Table, String> {
    let mut t = t.clone();
    if flag(a, "bool_to_number") {
        for r in t.rows.iter_mut() {
            for v in r.iter_mut() {
                match v.to_ascii_lowercase().as_str() {
                    "true" => *v = "1".into(),
                    "false" => *v = "0".into(),
                    _ => {}
                }
            }
        }
    }
    let requested: Vec<&str> = text(a, "columns").split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    for c in &requested {
        if t.column(c).is_none() {
            return Err(format!("column `{c}` not found"));
        }
    }
    let targets: BTreeSet<usize> = (0..t.headers.len())
        .filter(|&j| {
            if requested.is_empty() {
                !t.rows.iter().all(|r| r[j].is_empty() || r[j].trim().parse::<f64>().is_ok())
            } else {
                requested.contains(&t.headers[j].as_str())
            }
        })
        .collect();
    let sep = text(a, "prefix_sep");
    let (drop_first, dummy_na, keep) = (flag(a, "drop_first"), flag(a, "dummy_na"), flag(a, "keep_original"));
    let mut out = Table::default();
    // (source column, category) per output column; None category copies.
    let mut plan: Vec<(usize, Option<String>)> = Vec::new();
    for j in 0..t.headers.len() {
        if !targets.contains(&j) {
            plan.push((j, None));
            out.headers.push(t.headers[j].clone());
            continue;
        }
        if keep {
            plan.push((j, None));
            out.headers.push(t.headers[j].clone());
        }
        let mut cats: BTreeSet<String> = t.rows.iter().map(|r| r[j].clone()).filter(|v| !v.is_empty()).collect();
        if drop_first {
            let first = cats.iter().next().cloned();
            if let Some(first) = first {
                cats.remove(&first);
            }
        }
        for c in cats {
            out.headers.push(format!("{}{sep}{c}", t.headers[j]));
            plan.push((j, Some(c)));
        }
        if dummy_na {
            out.headers.push(format!("{}{sep}nan", t.headers[j]));
            plan.push((j, Some(String::new())));
        }
    }
    out.rows = t
        .rows
        .iter()
        .map(|r| {
            plan.iter()
                .map(|(j, cat)| match cat {
                    None => r[*j].clone(),
                    Some(c) => if &r[*j] == c { "1" } else { "0" }.to_string(),
                })
                .collect()
        })
        .collect();
    Ok(out)
}

pub fn train_test_split() -> StubTool {
    let s = spec(
        "train-test-split",
        "Train-Test-Split",
        ToolType::Preprocessing,
        "Split the rows of a CSV table into train and test partitions.",
        vec![PortSchema::new("input", DataKind::Csv)],
        vec![PortSchema::new("train", DataKind::Csv), PortSchema::new("test", DataKind::Csv)],
        vec![
            HyperparameterDef::new("shuffle", ValueKind::Boolean).with_default(true),
            HyperparameterDef::new("test_size", ValueKind::Real).with_default(0.25).with_range(0.0, 1.0),
            HyperparameterDef::new("random_state", ValueKind::Integer).with_default(42i64),
        ],
    );
    StubTool::new(s, |a, f| {
        let t = csv_input(f, "input")?;
        let (train, test) = split_rows(&t, real(a, "test_size"), flag(a, "shuffle"), int(a, "random_state"));
        Ok(files(vec![("train", train.to_csv()), ("test", test.to_csv())]))
    })
}

/// Test partition size is `ceil(n * test_size)`.
pub fn split_rows(t: &Table, test_size: f64, shuffle: bool, seed: i64) -> (Table, Table) {
    let n = t.rows.len();
    let n_test = ((n as f64) * test_size).ceil().min(n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed as u64));
    }
    let pick =
        |idx: &[usize]| Table { headers: t.headers.clone(), rows: idx.iter().map(|&i| t.rows[i].clone()).collect() };
    (pick(&order[n_test..]), pick(&order[..n_test]))
}

pub fn agglomerative_clustering() -> StubTool {
    let s = spec(
        "agglomerative-clustering",
        "AgglomerativeClustering",
        ToolType::AlgorithmicAnalysis,
        "Hierarchical agglomerative clustering of a numeric feature table with a dendrogram plot.",
        vec![PortSchema::new("features", DataKind::Csv)],
        vec![PortSchema::new("dendrogram_png", DataKind::Image), PortSchema::new("report", DataKind::Text)],
        vec![
            HyperparameterDef::new("linkage", ValueKind::Enumeration)
                .with_allowed(&["ward", "complete", "average", "single"])
                .with_default("ward"),
            HyperparameterDef::new("metric", ValueKind::Enumeration)
                .with_allowed(&["euclidean", "manhattan"])
                .with_default("euclidean"),
            HyperparameterDef::new("standardize", ValueKind::Boolean).with_default(true),
            HyperparameterDef::new("n_clusters", ValueKind::Integer).with_default(2i64).with_range(1.0, 1e6),
            HyperparameterDef::new("distance_threshold", ValueKind::Real).with_default(0.0).with_range(0.0, f64::MAX),
            HyperparameterDef::new("plot_title", ValueKind::Text).with_default("Agglomerative Clustering Dendrogram"),
        ],
    );
    StubTool::new(s, |a, f| {
        let t = csv_input(f, "features")?;
        let (_, mut x) = t.numeric(&ID_COLUMNS)?;
        if flag(a, "standardize") {
            x = algo::standardize(&x);
        }
        let linkage = algo::Linkage::parse(text(a, "linkage")).ok_or("unknown linkage")?;
        let manhattan = text(a, "metric") == "manhattan";
        if manhattan && linkage == algo::Linkage::Ward {
            return Err("ward linkage requires the euclidean metric".into());
        }
        let merges = algo::agglomerate(&x, linkage, manhattan);
        let threshold = Some(real(a, "distance_threshold")).filter(|t| *t > 0.0);
        let labels = algo::cut_tree(x.len(), &merges, int(a, "n_clusters") as usize, threshold);
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0usize; k];
        labels.iter().for_each(|&l| sizes[l] += 1);
        let mut report = format!("{}\nsamples: {}\nclusters: {k}\nsizes: {sizes:?}\n", text(a, "plot_title"), x.len());
        if let Some(top) = merges.last() {
            let _ = writeln!(report, "root height: {}", num(top.height));
        }
        Ok(files(vec![("dendrogram_png", plot::dendrogram_png(x.len(), &merges)), ("report", report.into_bytes())]))
    })
}

pub fn birch() -> StubTool {
    let s = spec(
        "birch",
        "Birch",
        ToolType::AlgorithmicAnalysis,
        "BIRCH-style clustering: threshold subclusters with an optional global clustering step.",
        vec![PortSchema::new("features", DataKind::Csv)],
        vec![
            PortSchema::new("subcluster_centers", DataKind::Csv),
            PortSchema::new("report", DataKind::Html),
            PortSchema::new("labels", DataKind::Csv),
        ],
        vec![
            HyperparameterDef::new("threshold", ValueKind::Real).with_default(0.5).with_range(0.0, f64::MAX),
            HyperparameterDef::new("branching_factor", ValueKind::Integer).with_default(50i64).with_range(2.0, 1e6),
            HyperparameterDef::new("n_clusters", ValueKind::Integer).with_default(3i64).with_range(0.0, 1e6),
            HyperparameterDef::new("standardize", ValueKind::Boolean).with_default(true),
        ],
    );
    StubTool::new(s, |a, f| {
        let t = csv_input(f, "features")?;
        let (names, mut x) = t.numeric(&ID_COLUMNS)?;
        if flag(a, "standardize") {
            x = algo::standardize(&x);
        }
        let threshold = real(a, "threshold");
        let cap = int(a, "branching_factor") as usize;
        // Leaf subclusters as (count, linear sum). The branching factor caps
        // the number of leaves.
        let mut subs: Vec<(f64, Vec<f64>)> = Vec::new();
        let mut assign = Vec::with_capacity(x.len());
        for p in &x {
            let centres: Matrix = subs.iter().map(|(n, ls)| ls.iter().map(|v| v / n).collect()).collect();
            let near = (!centres.is_empty()).then(|| algo::nearest(p, &centres));
            let idx = match near {
                Some(i) if algo::sq_dist(p, &centres[i]).sqrt() <= threshold || subs.len() >= cap => i,
                _ => {
                    subs.push((0.0, vec![0.0; p.len()]));
                    subs.len() - 1
                }
            };
            subs[idx].0 += 1.0;
            subs[idx].1.iter_mut().zip(p).for_each(|(s, v)| *s += v);
            assign.push(idx);
        }
        let centres: Matrix = subs.iter().map(|(n, ls)| ls.iter().map(|v| v / n).collect()).collect();
        let k = int(a, "n_clusters") as usize;
        let global = if k > 0 && centres.len() > k {
            algo::cut_tree(centres.len(), &algo::agglomerate(&centres, algo::Linkage::Ward, false), k, None)
        } else {
            (0..centres.len()).collect()
        };
        let labels = algo::relabel(&assign.iter().map(|&s| global[s]).collect::<Vec<_>>());
        let mut c = Table::new(&["subcluster", "n"]);
        c.headers.extend(names.iter().cloned());
        for (i, (centre, (n, _))) in centres.iter().zip(&subs).enumerate() {
            let mut row = vec![i.to_string(), (*n as usize).to_string()];
            row.extend(centre.iter().map(|v| num(*v)));
            c.rows.push(row);
        }
        let report = html(
            "Birch",
            &[
                ("samples".into(), x.len().to_string()),
                ("subclusters".into(), centres.len().to_string()),
                ("clusters".into(), labels.iter().max().map_or(0, |m| m + 1).to_string()),
            ],
        );
        Ok(files(vec![
            ("subcluster_centers", c.to_csv()),
            ("report", report),
            ("labels", labels_table(&t.ids(), &labels).to_csv()),
        ]))
    })
}

pub fn gaussian_mixture() -> StubTool {
    let s = spec(
        "gaussian-mixture-model",
        "GaussianMixtureModel",
        ToolType::AlgorithmicAnalysis,
        "Gaussian mixture clustering fitted by EM with hard labels, responsibilities and parameters.",
        vec![PortSchema::new("features", DataKind::Csv)],
        vec![
            PortSchema::new("labels", DataKind::Csv),
            PortSchema::new("responsibilities", DataKind::Csv),
            PortSchema::new("weights", DataKind::Csv),
            PortSchema::new("means", DataKind::Csv),
            PortSchema::new("covariances", DataKind::Csv),
            PortSchema::new("report", DataKind::Html),
        ],
        vec![
            HyperparameterDef::new("n_components", ValueKind::Integer).with_default(3i64).with_range(1.0, 1e4),
            HyperparameterDef::new("covariance_type", ValueKind::Enumeration)
                .with_allowed(&["diag"])
                .with_default("diag"),
            HyperparameterDef::new("tol", ValueKind::Real).with_default(1e-3).with_range(0.0, f64::MAX),
            HyperparameterDef::new("reg_covar", ValueKind::Real).with_default(1e-6).with_range(0.0, f64::MAX),
            HyperparameterDef::new("max_iter", ValueKind::Integer).with_default(100i64).with_range(1.0, 1e6),
            HyperparameterDef::new("random_state", ValueKind::Integer).with_default(42i64),
            HyperparameterDef::new("standardize", ValueKind::Boolean).with_default(true),
        ],
    );
    StubTool::new(s, |a, f| {
        let t = csv_input(f, "features")?;
        let (names, mut x) = t.numeric(&ID_COLUMNS)?;
        if flag(a, "standardize") {
            x = algo::standardize(&x);
        }
        let k = int(a, "n_components") as usize;
        if x.len() < k {
            return Err(format!("{} samples for {k} components", x.len()));
        }
        let fit = algo::gmm(
            &x,
            k,
            int(a, "random_state") as u64,
            int(a, "max_iter") as usize,
            real(a, "tol"),
            real(a, "reg_covar"),
        );
        let labels = fit.responsibilities.iter().map(|r| algo::argmax(r)).collect::<Vec<_>>();
        let ids = t.ids();
        let comp_headers = |first: &str| {
            let mut h = vec![first.to_string()];
            h.extend(names.iter().cloned());
            Table { headers: h, rows: Vec::new() }
        };
        let mut resp = Table { headers: vec!["index".into()], rows: Vec::new() };
        resp.headers.extend((0..k).map(|c| format!("p{c}")));
        for (id, r) in ids.iter().zip(&fit.responsibilities) {
            let mut row = vec![id.clone()];
            row.extend(r.iter().map(|v| num(*v)));
            resp.rows.push(row);
        }
        let mut weights = Table::new(&["component", "weight"]);
        let mut means = comp_headers("component");
        let mut covs = comp_headers("component");
        for c in 0..k {
            weights.rows.push(vec![c.to_string(), num(fit.weights[c])]);
            let mut m = vec![c.to_string()];
            m.extend(fit.means[c].iter().map(|v| num(*v)));
            means.rows.push(m);
            let mut v = vec![c.to_string()];
            v.extend(fit.variances[c].iter().map(|v| num(*v)));
            covs.rows.push(v);
        }
        let report = html(
            "GaussianMixtureModel",
            &[
                ("samples".into(), x.len().to_string()),
                ("components".into(), k.to_string()),
                ("iterations".into(), fit.iterations.to_string()),
                ("converged".into(), fit.converged.to_string()),
                ("log-likelihood".into(), num(fit.log_likelihood)),
            ],
        );
        Ok(files(vec![
            ("labels", labels_table(&ids, &labels).to_csv()),
            ("responsibilities", resp.to_csv()),
            ("weights", weights.to_csv()),
            ("means", means.to_csv()),
            ("covariances", covs.to_csv()),
            ("report", report),
        ]))
    })
}

pub fn branch_merge_aggregator() -> StubTool {
    let s = spec(
        "branch-merge-aggregator",
        "Branch-Merge-Aggregator",
        ToolType::PostProcessing,
        "Merge two branch outputs into one table by rows, by columns or on a key.",
        vec![PortSchema::new("left", DataKind::Csv), PortSchema::new("right", DataKind::Csv)],
        vec![PortSchema::new("output", DataKind::Csv)],
        vec![
            HyperparameterDef::new("mode", ValueKind::Enumeration)
                .with_allowed(&["concat_rows", "concat_columns", "merge_on_key"])
                .with_default("concat_rows"),
            HyperparameterDef::new("key", ValueKind::Text).with_default(""),
            HyperparameterDef::new("how", ValueKind::Enumeration)
                .with_allowed(&["inner", "outer", "left"])
                .with_default("inner"),
        ],
    );
    StubTool::new(s, |a, f| {
        let (l, r) = (csv_input(f, "left")?, csv_input(f, "right")?);
        let out = merge_tables(&l, &r, text(a, "mode"), text(a, "key"), text(a, "how"))?;
        Ok(files(vec![("output", out.to_csv())]))
    })
}

pub fn merge_tables(l: &Table, r: &Table, mode: &str, key: &str, how: &str) -> Result<Table, String> {
    let mut out = Table::default();
    match mode {
        "concat_rows" => {
            out.headers = match how {
                "inner" => l.headers.iter().filter(|h| r.headers.contains(h)).cloned().collect(),
                "left" => l.headers.clone(),
                _ => {
                    let mut h = l.headers.clone();
                    h.extend(r.headers.iter().filter(|x| !l.headers.contains(x)).cloned());
                    h
                }
            };
            for t in [l, r] {
                for row in &t.rows {
                    out.rows.push(
                        out.headers.iter().map(|h| t.column(h).map(|j| row[j].clone()).unwrap_or_default()).collect(),
                    );
                }
            }
        }
        "concat_columns" => {
            out.headers = l.headers.clone();
            for h in &r.headers {
                let mut name = h.clone();
                while out.headers.contains(&name) {
                    name.push_str("_right");
                }
                out.headers.push(name);
            }
            let n = match how {
                "inner" => l.rows.len().min(r.rows.len()),
                "left" => l.rows.len(),
                _ => l.rows.len().max(r.rows.len()),
            };
            for i in 0..n {
                let mut row = l.rows.get(i).cloned().unwrap_or_else(|| vec![String::new(); l.headers.len()]);
                row.extend(r.rows.get(i).cloned().unwrap_or_else(|| vec![String::new(); r.headers.len()]));
                out.rows.push(row);
            }
        }
        "merge_on_key" => {
            let (lk, rk) = match (l.column(key), r.column(key)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(format!("key column `{key}` missing from an input")),
            };
            out.headers = l.headers.clone();
            let rcols: Vec<usize> = (0..r.headers.len()).filter(|&j| j != rk).collect();
            for &j in &rcols {
                let mut name = r.headers[j].clone();
                while out.headers.contains(&name) {
                    name.push_str("_right");
                }
                out.headers.push(name);
            }
            let mut index: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, row) in r.rows.iter().enumerate() {
                index.entry(row[rk].as_str()).or_default().push(i);
            }
            let mut used = vec![false; r.rows.len()];
            for row in &l.rows {
                match index.get(row[lk].as_str()) {
                    Some(matches) => {
                        for &i in matches {
                            used[i] = true;
                            let mut o = row.clone();
                            o.extend(rcols.iter().map(|&j| r.rows[i][j].clone()));
                            out.rows.push(o);
                        }
                    }
                    None if how != "inner" => {
                        let mut o = row.clone();
                        o.extend(rcols.iter().map(|_| String::new()));
                        out.rows.push(o);
                    }
                    None => {}
                }
            }
            if how == "outer" {
                for (i, row) in r.rows.iter().enumerate().filter(|(i, _)| !used[*i]) {
                    let _ = i;
                    let mut o = vec![String::new(); l.headers.len()];
                    o[lk] = row[rk].clone();
                    o.extend(rcols.iter().map(|&j| row[j].clone()));
                    out.rows.push(o);
                }
            }
        }
        other => return Err(format!("unknown mode `{other}`")),
    }
    Ok(out)
}

pub fn comparative_benchmark() -> StubTool {
    let s = spec(
        "comparative-clustering-benchmark",
        "Comparative-Clustering-Benchmark",
        ToolType::Evaluation,
        "Compare multiple clustering outputs on the same dataset with internal and external indices.",
        vec![
            PortSchema::new("features", DataKind::Csv),
            PortSchema::new("predictions", DataKind::Csv),
            PortSchema::optional("ground_truth", DataKind::Csv),
        ],
        vec![PortSchema::new("output", DataKind::Csv)],
        vec![
            HyperparameterDef::new("id_column", ValueKind::Text).with_default("index"),
            HyperparameterDef::new("truth_label_column", ValueKind::Text).with_default("label"),
            HyperparameterDef::new("sort_by", ValueKind::Enumeration)
                .with_allowed(&["silhouette", "calinski_harabasz", "davies_bouldin"])
                .with_default("silhouette"),
        ],
    );
    StubTool::new(s, |a, f| {
        let feats = csv_input(f, "features")?;
        let preds = csv_input(f, "predictions")?;
        let truth = f.get("ground_truth").map(|b| Table::parse(b)).transpose()?;
        Ok(files(vec![(
            "output",
            benchmark(
                &feats,
                &preds,
                truth.as_ref(),
                text(a, "id_column"),
                text(a, "truth_label_column"),
                text(a, "sort_by"),
            )?
            .to_csv(),
        )]))
    })
}

/// Rows of `t` aligned to `ids` through `id_col`, or by position.
fn align<'a>(t: &'a Table, id_col: &str, ids: &[String]) -> Result<Vec<&'a Vec<String>>, String> {
    match t.column(id_col) {
        Some(j) => {
            let by_id: BTreeMap<&str, &Vec<String>> = t.rows.iter().map(|r| (r[j].as_str(), r)).collect();
            ids.iter()
                .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| format!("no row for id `{id}`")))
                .collect()
        }
        None if t.rows.len() == ids.len() => Ok(t.rows.iter().collect()),
        None => Err(format!("cannot align {} rows with {} samples", t.rows.len(), ids.len())),
    }
}

fn labels_of(values: impl Iterator<Item = String>) -> Vec<usize> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    values
        .map(|v| {
            let next = seen.len();
            *seen.entry(v).or_insert(next)
        })
        .collect()
}

pub fn benchmark(
    feats: &Table,
    preds: &Table,
    truth: Option<&Table>,
    id_col: &str,
    truth_col: &str,
    sort_by: &str,
) -> Result<Table, String> {
    let (_, x) = feats.numeric(&[id_col, truth_col])?;
    let ids: Vec<String> = match feats.column(id_col) {
        Some(j) => feats.rows.iter().map(|r| r[j].clone()).collect(),
        None => (0..feats.rows.len()).map(|i| i.to_string()).collect(),
    };
    let truth_labels = match truth {
        Some(t) => {
            let rows = align(t, id_col, &ids)?;
            let j = t
                .column(truth_col)
                .or_else(|| (0..t.headers.len()).find(|&j| t.headers[j] != id_col))
                .ok_or("ground truth has no label column")?;
            Some(labels_of(rows.iter().map(|r| r[j].clone())))
        }
        None => feats.column(truth_col).map(|j| labels_of(feats.rows.iter().map(|r| r[j].clone()))),
    };
    let rows = align(preds, id_col, &ids)?;
    let mut scored: Vec<(String, usize, f64, f64, f64, Option<f64>)> = Vec::new();
    for j in (0..preds.headers.len()).filter(|&j| preds.headers[j] != id_col) {
        let labels = labels_of(rows.iter().map(|r| r[j].clone()));
        let k = labels.iter().max().map_or(0, |m| m + 1);
        scored.push((
            preds.headers[j].clone(),
            k,
            algo::silhouette(&x, &labels),
            algo::calinski_harabasz(&x, &labels),
            algo::davies_bouldin(&x, &labels),
            truth_labels.as_ref().map(|t| algo::adjusted_rand(t, &labels)),
        ));
    }
    match sort_by {
        "calinski_harabasz" => scored.sort_by(|a, b| b.3.total_cmp(&a.3).then(a.0.cmp(&b.0))),
        "davies_bouldin" => scored.sort_by(|a, b| a.4.total_cmp(&b.4).then(a.0.cmp(&b.0))),
        _ => scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0))),
    }
    let mut out =
        Table::new(&["method", "n_clusters", "silhouette", "calinski_harabasz", "davies_bouldin", "adjusted_rand"]);
    for (m, k, s, c, d, ari) in scored {
        out.rows.push(vec![m, k.to_string(), num(s), num(c), num(d), ari.map(num).unwrap_or_default()]);
    }
    Ok(out)
}
