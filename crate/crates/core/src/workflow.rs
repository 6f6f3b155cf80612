//! The submit-time workflow document.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

use serde::{Deserialize, Deserializer, Serialize};

use crate::signature::Signature;
use crate::template::OpTemplate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ApiVersion {
    #[default]
    #[serde(rename = "opflow/v1")]
    V1,
}

/// A named set of templates, an entrypoint, and global inputs.
///
/// Global input parameters carry their bound value in `default`; the CLI's
/// `--param` overrides land there too.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowSpec {
    #[serde(rename = "apiVersion")]
    pub api_version: ApiVersion,
    pub name: String,
    pub entrypoint: String,
    #[serde(default)]
    pub global_inputs: Signature,
    #[serde(deserialize_with = "deserialize_templates")]
    pub templates: BTreeMap<String, OpTemplate>,
}

fn deserialize_templates<'de, D: Deserializer<'de>>(
    d: D,
) -> Result<BTreeMap<String, OpTemplate>, D::Error> {
    let mut map = BTreeMap::<String, OpTemplate>::deserialize(d)?;
    for (name, t) in map.iter_mut() {
        t.set_name(name.clone());
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OverrideError {
    #[error("workflow has no global input parameter `{0}`")]
    UnknownParameter(String),
}

impl WorkflowSpec {
    pub fn new(name: impl Into<String>, entrypoint: impl Into<String>) -> Self {
        WorkflowSpec {
            api_version: ApiVersion::V1,
            name: name.into(),
            entrypoint: entrypoint.into(),
            global_inputs: Signature::default(),
            templates: BTreeMap::new(),
        }
    }

    /// Adds a template under `name` (overwriting its `name` field).
    pub fn with_template(mut self, name: &str, mut template: OpTemplate) -> Self {
        template.set_name(name.to_string());
        self.templates.insert(name.to_string(), template);
        self
    }

    pub fn template(&self, name: &str) -> Option<&OpTemplate> {
        self.templates.get(name)
    }

    /// Replaces the bound value of a global input parameter.
    pub fn set_parameter(&mut self, name: &str, text: &str) -> Result<(), OverrideError> {
        let decl = self
            .global_inputs
            .parameters
            .get_mut(name)
            .ok_or_else(|| OverrideError::UnknownParameter(name.to_string()))?;
        decl.default = Some(text.to_string());
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
