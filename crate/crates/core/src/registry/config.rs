//! The local YAML form of a tool's formal specification.

use serde::{Deserialize, Serialize};

use super::schema::{HyperparameterDef, PortSchema, ToolId, ToolSpec, ToolType};
use super::version::VersionLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToolConfigFile {
    tool_id: ToolId,
    title: String,
    #[serde(rename = "type")]
    tool_type: ToolType,
    #[serde(default)]
    description: String,
    version: VersionLabel,
    #[serde(default)]
    hyperparameters: Vec<HyperparameterDef>,
    #[serde(default)]
    inputs: Vec<PortSchema>,
    #[serde(default)]
    outputs: Vec<PortSchema>,
    #[serde(default)]
    repository: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("tool config parse error: {0}")]
    Parse(String),
    #[error("tool config schema violation: {0}")]
    SchemaViolation(String),
}

/// Parses a tool configuration document and checks the spec invariants.
pub fn parse_tool_config(text: &str) -> Result<(ToolSpec, VersionLabel), ConfigError> {
    let file: ToolConfigFile = serde_yaml::from_str(text).map_err(|e| {
        let msg = e.to_string();
        // Missing keys and unknown kinds are schema problems, not syntax.
        if msg.contains("missing field")
            || msg.contains("unknown variant")
            || msg.contains("unknown field")
            || msg.contains("unknown tool type")
        {
            ConfigError::SchemaViolation(msg)
        } else {
            ConfigError::Parse(msg)
        }
    })?;
    let spec = ToolSpec {
        tool_id: file.tool_id,
        title: file.title,
        tool_type: file.tool_type,
        description: file.description,
        inputs: file.inputs,
        outputs: file.outputs,
        hyperparameters: file.hyperparameters,
        repository: file.repository,
    };
    spec.check().map_err(ConfigError::SchemaViolation)?;
    Ok((spec, file.version))
}

/// Renders a spec and version as a tool configuration document.
pub fn render_tool_config(spec: &ToolSpec, version: VersionLabel) -> String {
    let file = ToolConfigFile {
        tool_id: spec.tool_id.clone(),
        title: spec.title.clone(),
        tool_type: spec.tool_type,
        description: spec.description.clone(),
        version,
        hyperparameters: spec.hyperparameters.clone(),
        inputs: spec.inputs.clone(),
        outputs: spec.outputs.clone(),
        repository: spec.repository.clone(),
    };
    serde_yaml::to_string(&file).expect("tool config serializes")
}
