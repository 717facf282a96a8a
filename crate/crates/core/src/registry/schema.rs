use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::hyperparams::{check_value, HyperValue};

/// Identifier of a registered tool. Restricted to characters that are safe
/// as a single path segment, since the data root stores tools by id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ToolId(pub String);

impl ToolId {
    pub fn new(id: impl Into<String>) -> Self {
        ToolId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_path_safe(&self) -> bool {
        !self.0.is_empty()
            && self.0 != "."
            && self.0 != ".."
            && self.0.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
    }
}

impl fmt::Display for ToolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ToolId {
    fn from(s: &str) -> Self {
        ToolId(s.to_string())
    }
}

/// The closed set of data kinds a port may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DataKind {
    Csv,
    Tsv,
    Image,
    Text,
    Html,
    String,
    Path,
    Model,
}

impl DataKind {
    pub const ALL: [DataKind; 8] = [
        DataKind::Csv,
        DataKind::Tsv,
        DataKind::Image,
        DataKind::Text,
        DataKind::Html,
        DataKind::String,
        DataKind::Path,
        DataKind::Model,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DataKind::Csv => "CSV",
            DataKind::Tsv => "TSV",
            DataKind::Image => "IMAGE",
            DataKind::Text => "TEXT",
            DataKind::Html => "HTML",
            DataKind::String => "STRING",
            DataKind::Path => "PATH",
            DataKind::Model => "MODEL",
        }
    }

    /// Edge compatibility is exact kind equality; there are no coercions.
    pub fn compatible_with(self, target: DataKind) -> bool {
        self == target
    }
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_true() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortSchema {
    pub name: String,
    pub kind: DataKind,
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub required: bool,
}

impl PortSchema {
    pub fn new(name: &str, kind: DataKind) -> Self {
        PortSchema { name: name.to_string(), kind, required: true }
    }

    pub fn optional(name: &str, kind: DataKind) -> Self {
        PortSchema { name: name.to_string(), kind, required: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Integer,
    Real,
    Boolean,
    Text,
    Enumeration,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueKind::Integer => "integer",
            ValueKind::Real => "real",
            ValueKind::Boolean => "boolean",
            ValueKind::Text => "text",
            ValueKind::Enumeration => "enumeration",
        };
        f.write_str(s)
    }
}

/// A hyperparameter definition. Numeric bounds form a closed interval; an
/// enumeration lists its allowed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperparameterDef {
    pub name: String,
    pub kind: ValueKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<HyperValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed: Option<Vec<String>>,
}

impl HyperparameterDef {
    pub fn new(name: &str, kind: ValueKind) -> Self {
        HyperparameterDef { name: name.to_string(), kind, default: None, min: None, max: None, allowed: None }
    }

    pub fn with_default(mut self, v: impl Into<HyperValue>) -> Self {
        self.default = Some(v.into());
        self
    }

    pub fn with_range(mut self, min: f64, max: f64) -> Self {
        self.min = Some(min);
        self.max = Some(max);
        self
    }

    pub fn with_allowed(mut self, allowed: &[&str]) -> Self {
        self.allowed = Some(allowed.iter().map(|s| s.to_string()).collect());
        self
    }

    fn check(&self) -> Result<(), String> {
        if self.name.trim().is_empty() {
            return Err("hyperparameter name must be nonempty".into());
        }
        let numeric = matches!(self.kind, ValueKind::Integer | ValueKind::Real);
        if !numeric && (self.min.is_some() || self.max.is_some()) {
            return Err(format!("hyperparameter `{}`: min/max only apply to numeric kinds", self.name));
        }
        if let (Some(lo), Some(hi)) = (self.min, self.max) {
            if lo > hi || lo.is_nan() || hi.is_nan() {
                return Err(format!("hyperparameter `{}`: empty interval [{lo}, {hi}]", self.name));
            }
        }
        match (&self.kind, &self.allowed) {
            (ValueKind::Enumeration, None) => {
                return Err(format!("enumeration `{}` needs at least one allowed value", self.name))
            }
            (ValueKind::Enumeration, Some(a)) if a.is_empty() => {
                return Err(format!("enumeration `{}` needs at least one allowed value", self.name))
            }
            (ValueKind::Enumeration, _) => {}
            (_, Some(_)) => {
                return Err(format!("hyperparameter `{}`: allowed values only apply to enumerations", self.name))
            }
            _ => {}
        }
        if let Some(default) = &self.default {
            check_value(self, default).map_err(|e| format!("default violates its own constraint: {e}"))?;
        }
        Ok(())
    }
}

/// Functional role of a tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ToolType {
    Preprocessing,
    Analysis,
    Evaluation,
    AlgorithmicAnalysis,
    DataTransformation,
    Exporter,
    PostProcessing,
}

impl ToolType {
    pub const ALL: [ToolType; 7] = [
        ToolType::Preprocessing,
        ToolType::Analysis,
        ToolType::Evaluation,
        ToolType::AlgorithmicAnalysis,
        ToolType::DataTransformation,
        ToolType::Exporter,
        ToolType::PostProcessing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolType::Preprocessing => "Preprocessing",
            ToolType::Analysis => "Analysis",
            ToolType::Evaluation => "Evaluation",
            ToolType::AlgorithmicAnalysis => "AlgorithmicAnalysis",
            ToolType::DataTransformation => "DataTransformation",
            ToolType::Exporter => "Exporter",
            ToolType::PostProcessing => "PostProcessing",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown tool type `{0}`")]
pub struct UnknownToolType(pub String);

impl FromStr for ToolType {
    type Err = UnknownToolType;

    /// Accepts canonical names plus the hyphenated and extractor spellings
    /// used in tool listings ("Pre-Processing", "Self-Extractor", ...).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| !matches!(c, '-' | '_' | ' ')).flat_map(char::to_lowercase).collect();
        let t = match key.as_str() {
            "preprocessing" => ToolType::Preprocessing,
            "analysis" => ToolType::Analysis,
            "evaluation" => ToolType::Evaluation,
            "algorithmicanalysis" => ToolType::AlgorithmicAnalysis,
            "datatransformation" => ToolType::DataTransformation,
            "exporter" | "extractor" | "selfextractor" => ToolType::Exporter,
            "postprocessing" => ToolType::PostProcessing,
            _ => return Err(UnknownToolType(s.to_string())),
        };
        Ok(t)
    }
}

impl TryFrom<String> for ToolType {
    type Error = UnknownToolType;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ToolType> for String {
    fn from(t: ToolType) -> String {
        t.as_str().to_string()
    }
}

impl fmt::Display for ToolType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The formal contract of a tool: ports, hyperparameters and role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub tool_id: ToolId,
    pub title: String,
    #[serde(rename = "type")]
    pub tool_type: ToolType,
    pub description: String,
    pub inputs: Vec<PortSchema>,
    pub outputs: Vec<PortSchema>,
    pub hyperparameters: Vec<HyperparameterDef>,
    pub repository: String,
}

impl ToolSpec {
    pub fn input(&self, name: &str) -> Option<&PortSchema> {
        self.inputs.iter().find(|p| p.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&PortSchema> {
        self.outputs.iter().find(|p| p.name == name)
    }

    pub fn hyperparameter(&self, name: &str) -> Option<&HyperparameterDef> {
        self.hyperparameters.iter().find(|h| h.name == name)
    }

    /// Checks every structural invariant, returning the first violation.
    pub fn check(&self) -> Result<(), String> {
        if !self.tool_id.is_path_safe() {
            return Err(format!("tool id `{}` must be nonempty and use only [A-Za-z0-9._-]", self.tool_id));
        }
        for (direction, ports) in [("input", &self.inputs), ("output", &self.outputs)] {
            let mut seen = BTreeSet::new();
            for p in ports {
                if p.name.trim().is_empty() {
                    return Err(format!("{direction} port name must be nonempty"));
                }
                if !seen.insert(p.name.as_str()) {
                    return Err(format!("duplicate {direction} port `{}`", p.name));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for h in &self.hyperparameters {
            if !seen.insert(h.name.as_str()) {
                return Err(format!("duplicate hyperparameter `{}`", h.name));
            }
            h.check()?;
        }
        if self.tool_type == ToolType::Exporter {
            if let Some(p) = self.inputs.iter().find(|p| p.required) {
                return Err(format!("exporter tools cannot declare required input `{}`", p.name));
            }
        }
        Ok(())
    }
}
