//! Operation templates, steps and value bindings.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::policy::{Ratio, RetryPolicy};
use crate::signature::Signature;
use crate::value::{deserialize_text, ArtifactValue};

/// Source of a value bound to a step input or a template output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRef {
    /// Literal parameter text; its tag comes from the receiving signature.
    Value(#[serde(deserialize_with = "deserialize_text")] String),
    /// Literal artifact: a storage key or an absolute local path.
    Artifact(ArtifactValue),
    WorkflowInput(String),
    TemplateInput(String),
    StepOutput { step: String, name: String },
    /// The current slice element.
    Item,
    /// A field of the current slice element (which must be a JSON object).
    ItemField(String),
}

impl ValueRef {
    pub fn value(text: impl Into<String>) -> Self {
        ValueRef::Value(text.into())
    }

    pub fn step_output(step: impl Into<String>, name: impl Into<String>) -> Self {
        ValueRef::StepOutput {
            step: step.into(),
            name: name.into(),
        }
    }

    pub fn referenced_step(&self) -> Option<&str> {
        match self {
            ValueRef::StepOutput { step, .. } => Some(step),
            _ => None,
        }
    }

    pub fn uses_item(&self) -> bool {
        matches!(self, ValueRef::Item | ValueRef::ItemField(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlicesConfig {
    pub sliced_inputs: BTreeSet<String>,
    #[serde(default)]
    pub stacked_outputs: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<u32>,
}

/// One step (in a Steps body) or task (in a DAG body).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDef {
    pub name: String,
    pub template: String,
    #[serde(default)]
    pub input_bindings: BTreeMap<String, ValueRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slices: Option<SlicesConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_template: Option<String>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_seconds: Option<u64>,
    #[serde(default)]
    pub continue_on_failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continue_on_success_ratio: Option<Ratio>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continue_on_num_success: Option<u64>,
    /// Executor override for this step; beats the workflow default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executor: Option<String>,
    /// Extra DAG edges on top of the inferred ones. Only valid in DAG bodies.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dependencies: Vec<String>,
}

impl StepDef {
    pub fn new(name: impl Into<String>, template: impl Into<String>) -> Self {
        StepDef {
            name: name.into(),
            template: template.into(),
            input_bindings: BTreeMap::new(),
            when: None,
            slices: None,
            key_template: None,
            retry: RetryPolicy::default(),
            timeout_seconds: None,
            continue_on_failed: false,
            continue_on_success_ratio: None,
            continue_on_num_success: None,
            executor: None,
            dependencies: Vec::new(),
        }
    }

    pub fn bind(mut self, input: impl Into<String>, value: ValueRef) -> Self {
        self.input_bindings.insert(input.into(), value);
        self
    }

    pub fn when(mut self, expr: impl Into<String>) -> Self {
        self.when = Some(expr.into());
        self
    }

    pub fn key(mut self, key_template: impl Into<String>) -> Self {
        self.key_template = Some(key_template.into());
        self
    }

    pub fn depends_on(mut self, task: impl Into<String>) -> Self {
        self.dependencies.push(task.into());
        self
    }

    pub fn is_sliced(&self) -> bool {
        self.slices.is_some()
    }
}

/// An executable unit: a script run by `command` inside a work directory.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptTemplate {
    #[serde(skip)]
    pub name: String,
    /// Recorded for provenance only.
    #[serde(default)]
    pub image: String,
    pub command: Vec<String>,
    pub script: String,
    #[serde(default)]
    pub inputs: Signature,
    #[serde(default)]
    pub outputs: Signature,
    /// Output parameter name -> workdir-relative file whose content is the value.
    #[serde(default)]
    pub output_parameter_sources: BTreeMap<String, String>,
    /// Output artifact name -> workdir-relative path collected after the run.
    #[serde(default)]
    pub output_artifact_sources: BTreeMap<String, String>,
    /// Input artifact name -> workdir-relative path it is materialized at.
    #[serde(default)]
    pub input_artifact_mounts: BTreeMap<String, String>,
}

/// Body and output wiring shared by Steps and DAG templates.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeTemplate {
    #[serde(skip)]
    pub name: String,
    #[serde(default)]
    pub inputs: Signature,
    #[serde(default)]
    pub outputs: Signature,
    pub body: Vec<StepDef>,
    #[serde(default)]
    pub output_bindings: BTreeMap<String, ValueRef>,
}

impl CompositeTemplate {
    pub fn member(&self, name: &str) -> Option<&StepDef> {
        self.body.iter().find(|s| s.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.body.iter().position(|s| s.name == name)
    }
}

/// Members run strictly in order.
pub type StepsTemplate = CompositeTemplate;
/// Members run as soon as their dependencies settle.
pub type DagTemplate = CompositeTemplate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepKind {
    Pod,
    Steps,
    #[serde(rename = "DAG")]
    Dag,
}

impl StepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Pod => "Pod",
            StepKind::Steps => "Steps",
            StepKind::Dag => "DAG",
        }
    }

    pub fn parse_word(word: &str) -> Option<StepKind> {
        match word {
            "Pod" => Some(StepKind::Pod),
            "Steps" => Some(StepKind::Steps),
            "DAG" => Some(StepKind::Dag),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpTemplate {
    Script(ScriptTemplate),
    Steps(StepsTemplate),
    Dag(DagTemplate),
}

impl OpTemplate {
    pub fn name(&self) -> &str {
        match self {
            OpTemplate::Script(t) => &t.name,
            OpTemplate::Steps(t) | OpTemplate::Dag(t) => &t.name,
        }
    }

    pub(crate) fn set_name(&mut self, name: String) {
        match self {
            OpTemplate::Script(t) => t.name = name,
            OpTemplate::Steps(t) | OpTemplate::Dag(t) => t.name = name,
        }
    }

    pub fn inputs(&self) -> &Signature {
        match self {
            OpTemplate::Script(t) => &t.inputs,
            OpTemplate::Steps(t) | OpTemplate::Dag(t) => &t.inputs,
        }
    }

    pub fn outputs(&self) -> &Signature {
        match self {
            OpTemplate::Script(t) => &t.outputs,
            OpTemplate::Steps(t) | OpTemplate::Dag(t) => &t.outputs,
        }
    }

    pub fn kind(&self) -> StepKind {
        match self {
            OpTemplate::Script(_) => StepKind::Pod,
            OpTemplate::Steps(_) => StepKind::Steps,
            OpTemplate::Dag(_) => StepKind::Dag,
        }
    }

    pub fn composite(&self) -> Option<&CompositeTemplate> {
        match self {
            OpTemplate::Script(_) => None,
            OpTemplate::Steps(t) | OpTemplate::Dag(t) => Some(t),
        }
    }

    /// Steps bodies inside this template; empty for scripts.
    pub fn body(&self) -> &[StepDef] {
        self.composite().map(|c| c.body.as_slice()).unwrap_or(&[])
    }
}
