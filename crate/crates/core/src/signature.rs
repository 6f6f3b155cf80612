//! Input/output signatures and the type check applied on both sides of an execution.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

use serde::{Deserialize, Serialize};

use crate::value::{deserialize_opt_text, ArtifactValue, IoValues, ParameterValue, TypeTag, ValueError};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterDecl {
    #[serde(default)]
    pub type_tag: TypeTag,
    #[serde(default)]
    pub optional: bool,
    #[serde(
        default,
        deserialize_with = "deserialize_opt_text",
        skip_serializing_if = "Option::is_none"
    )]
    pub default: Option<String>,
}

impl ParameterDecl {
    pub fn of(type_tag: TypeTag) -> Self {
        ParameterDecl {
            type_tag,
            ..Default::default()
        }
    }

    pub fn with_default(mut self, text: impl Into<String>) -> Self {
        self.default = Some(text.into());
        self
    }

    pub fn optional(mut self) -> Self {
        self.optional = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactDecl {
    #[serde(default)]
    pub optional: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_location: Option<String>,
}

/// Declared parameters and artifacts of one side of a template.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Signature {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub parameters: BTreeMap<String, ParameterDecl>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub artifacts: BTreeMap<String, ArtifactDecl>,
}

impl Signature {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parameter(mut self, name: &str, decl: ParameterDecl) -> Self {
        self.parameters.insert(name.to_string(), decl);
        self
    }

    pub fn artifact(mut self, name: &str, decl: ArtifactDecl) -> Self {
        self.artifacts.insert(name.to_string(), decl);
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.parameters.contains_key(name) || self.artifacts.contains_key(name)
    }

    pub fn is_empty(&self) -> bool {
        self.parameters.is_empty() && self.artifacts.is_empty()
    }

    /// True when the entry can be left unbound: optional, or has a default.
    pub fn may_omit(&self, name: &str) -> bool {
        if let Some(p) = self.parameters.get(name) {
            return p.optional || p.default.is_some();
        }
        if let Some(a) = self.artifacts.get(name) {
            return a.optional || a.default_location.is_some();
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TypecheckError {
    #[error("missing required entry `{name}`")]
    MissingInput { name: String },
    #[error("entry `{name}`: {source}")]
    TypeMismatch { name: String, source: ValueError },
    #[error("unknown entry `{name}`")]
    UnknownKey { name: String },
}

impl TypecheckError {
    pub fn name(&self) -> &str {
        match self {
            TypecheckError::MissingInput { name }
            | TypecheckError::TypeMismatch { name, .. }
            | TypecheckError::UnknownKey { name } => name,
        }
    }
}

/// Checks `values` against `signature` and returns the normalized map.
///
/// Missing entries take their default when one is declared, optional ones
/// are dropped, the rest fail. Parameter texts are re-parsed under the
/// declared tag (the incoming tag is ignored) and canonicalized. The result
/// is a fixed point: checking it again returns it unchanged.
pub fn typecheck_io(signature: &Signature, values: &IoValues) -> Result<IoValues, TypecheckError> {
    if let Some(name) = values
        .parameters
        .keys()
        .find(|k| !signature.parameters.contains_key(*k))
        .or_else(|| values.artifacts.keys().find(|k| !signature.artifacts.contains_key(*k)))
    {
        return Err(TypecheckError::UnknownKey { name: name.clone() });
    }

    let mut out = IoValues::default();
    for (name, decl) in &signature.parameters {
        let text = match (values.parameters.get(name), &decl.default) {
            (Some(v), _) => &v.text,
            (None, Some(d)) => d,
            (None, None) if decl.optional => continue,
            (None, None) => return Err(TypecheckError::MissingInput { name: name.clone() }),
        };
        let value = ParameterValue::parse(decl.type_tag, text).map_err(|source| {
            TypecheckError::TypeMismatch {
                name: name.clone(),
                source,
            }
        })?;
        out.parameters.insert(name.clone(), value);
    }
    for (name, decl) in &signature.artifacts {
        let supplied = values.artifacts.get(name).filter(|a| !a.location.is_empty());
        let value = match (supplied, &decl.default_location) {
            (Some(a), _) => ArtifactValue {
                location: a.location.clone(),
                optional: decl.optional,
            },
            (None, Some(loc)) => ArtifactValue {
                location: loc.clone(),
                optional: decl.optional,
            },
            (None, None) if decl.optional => continue,
            (None, None) => return Err(TypecheckError::MissingInput { name: name.clone() }),
        };
        out.artifacts.insert(name.clone(), value);
    }
    Ok(out)
}
