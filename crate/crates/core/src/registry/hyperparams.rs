use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::schema::{HyperparameterDef, ToolSpec, ValueKind};

/// A concrete hyperparameter value as it appears in configuration and on
/// the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HyperValue {
    Boolean(bool),
    Integer(i64),
    Real(f64),
    Text(String),
}

impl fmt::Display for HyperValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HyperValue::Boolean(b) => write!(f, "{b}"),
            HyperValue::Integer(i) => write!(f, "{i}"),
            HyperValue::Real(r) => write!(f, "{r}"),
            HyperValue::Text(s) => write!(f, "{s:?}"),
        }
    }
}

impl From<bool> for HyperValue {
    fn from(b: bool) -> Self {
        HyperValue::Boolean(b)
    }
}

impl From<i64> for HyperValue {
    fn from(i: i64) -> Self {
        HyperValue::Integer(i)
    }
}

impl From<f64> for HyperValue {
    fn from(r: f64) -> Self {
        HyperValue::Real(r)
    }
}

impl From<&str> for HyperValue {
    fn from(s: &str) -> Self {
        HyperValue::Text(s.to_string())
    }
}

/// Hyperparameter name to value. Ordered so that serialized assignments are
/// canonical.
pub type Assignment = BTreeMap<String, HyperValue>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParamError {
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("missing required parameter `{0}` (no default)")]
    MissingRequired(String),
    #[error("parameter `{name}` expects a {expected} value, got {got}")]
    TypeMismatch { name: String, expected: ValueKind, got: HyperValue },
    #[error("parameter `{name}` violates {bound}")]
    ConstraintViolation { name: String, bound: String },
}

/// Checks one value against its definition, returning the normalized value.
/// Integers supplied for a real-valued parameter are widened.
pub fn check_value(def: &HyperparameterDef, value: &HyperValue) -> Result<HyperValue, ParamError> {
    let mismatch = || ParamError::TypeMismatch { name: def.name.clone(), expected: def.kind, got: value.clone() };
    let normalized = match (def.kind, value) {
        (ValueKind::Integer, HyperValue::Integer(_)) => value.clone(),
        (ValueKind::Real, HyperValue::Real(r)) => {
            if !r.is_finite() {
                return Err(ParamError::ConstraintViolation { name: def.name.clone(), bound: "finite real".into() });
            }
            value.clone()
        }
        (ValueKind::Real, HyperValue::Integer(i)) => HyperValue::Real(*i as f64),
        (ValueKind::Boolean, HyperValue::Boolean(_)) => value.clone(),
        (ValueKind::Text, HyperValue::Text(_)) => value.clone(),
        (ValueKind::Enumeration, HyperValue::Text(s)) => {
            let allowed = def.allowed.as_deref().unwrap_or_default();
            if !allowed.iter().any(|a| a == s) {
                return Err(ParamError::ConstraintViolation {
                    name: def.name.clone(),
                    bound: format!("allowed values {allowed:?}"),
                });
            }
            value.clone()
        }
        _ => return Err(mismatch()),
    };
    let numeric = match normalized {
        HyperValue::Integer(i) => Some(i as f64),
        HyperValue::Real(r) => Some(r),
        _ => None,
    };
    if let Some(x) = numeric {
        if let Some(lo) = def.min {
            if x < lo {
                return Err(ParamError::ConstraintViolation { name: def.name.clone(), bound: format!("min {lo}") });
            }
        }
        if let Some(hi) = def.max {
            if x > hi {
                return Err(ParamError::ConstraintViolation { name: def.name.clone(), bound: format!("max {hi}") });
            }
        }
    }
    Ok(normalized)
}

/// Validates an assignment against a tool's hyperparameter schema.
///
/// The result names every defined hyperparameter: supplied values are
/// normalized, missing ones are filled from defaults. Validating the result
/// again returns it unchanged.
pub fn validate_hyperparameters(spec: &ToolSpec, assignment: &Assignment) -> Result<Assignment, ParamError> {
    if let Some(unknown) = assignment.keys().find(|k| spec.hyperparameter(k).is_none()) {
        return Err(ParamError::UnknownParameter(unknown.clone()));
    }
    let mut out = Assignment::new();
    for def in &spec.hyperparameters {
        let value = match (assignment.get(&def.name), &def.default) {
            (Some(v), _) => check_value(def, v)?,
            (None, Some(d)) => d.clone(),
            (None, None) => return Err(ParamError::MissingRequired(def.name.clone())),
        };
        out.insert(def.name.clone(), value);
    }
    Ok(out)
}
