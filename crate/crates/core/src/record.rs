//! Step lifecycle phases and the persisted record of one step instance.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::policy::FailureKind;
use crate::template::StepKind;
use crate::value::{ArtifactValue, IoValues, ParameterValue, ValueError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Pending,
    Running,
    Succeeded,
    Failed,
    Skipped,
    Reused,
}

impl Phase {
    pub const ALL: [Phase; 6] = [
        Phase::Pending,
        Phase::Running,
        Phase::Succeeded,
        Phase::Failed,
        Phase::Skipped,
        Phase::Reused,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pending => "Pending",
            Phase::Running => "Running",
            Phase::Succeeded => "Succeeded",
            Phase::Failed => "Failed",
            Phase::Skipped => "Skipped",
            Phase::Reused => "Reused",
        }
    }

    pub fn is_terminal(self) -> bool {
        !matches!(self, Phase::Pending | Phase::Running)
    }

    /// Succeeded or Reused: outputs are available.
    pub fn has_outputs(self) -> bool {
        matches!(self, Phase::Succeeded | Phase::Reused)
    }

    /// Legal moves of the phase machine. Re-persisting the same phase is
    /// allowed (and is how a retry's `Running -> Running` is recorded).
    pub fn can_transition(self, to: Phase) -> bool {
        use Phase::*;
        self == to
            || matches!(
                (self, to),
                (Pending, Running) | (Pending, Skipped) | (Pending, Reused) | (Running, Succeeded) | (Running, Failed)
            )
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("`{0}` is not a phase word")]
pub struct PhaseParseError(pub String);

impl FromStr for Phase {
    type Err = PhaseParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| PhaseParseError(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub kind: FailureKind,
    pub message: String,
}

impl Failure {
    pub fn fatal(message: impl Into<String>) -> Self {
        Failure {
            kind: FailureKind::Fatal,
            message: message.into(),
        }
    }
}

/// Execution state of one step instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Resolved key, or `<name>-<suffix>` when the step has no key template.
    pub key: String,
    /// True when `key` came from a key template (directly or via a keyed slice group).
    pub keyed: bool,
    pub name: String,
    pub template: String,
    pub kind: StepKind,
    /// Position in the instantiation tree, e.g. `loop/next/body[2]`.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    pub phase: Phase,
    pub attempt: u32,
    pub inputs: IoValues,
    /// Present iff the phase is Succeeded or Reused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<IoValues>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ended_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModifyError {
    #[error("step `{key}` is {phase}; only Succeeded or Reused steps can be modified")]
    NotReusable { key: String, phase: Phase },
    #[error("step has no output `{0}`")]
    UnknownOutput(String),
    #[error("output `{name}`: {source}")]
    TypeMismatch { name: String, source: ValueError },
}

impl StepRecord {
    pub fn duration_ms(&self) -> Option<u64> {
        Some(self.ended_at?.saturating_sub(self.started_at?))
    }

    fn modifiable_outputs(&self) -> Result<&IoValues, ModifyError> {
        match (&self.outputs, self.phase.has_outputs()) {
            (Some(o), true) => Ok(o),
            _ => Err(ModifyError::NotReusable {
                key: self.key.clone(),
                phase: self.phase,
            }),
        }
    }

    /// Copy of this record with one output parameter replaced; the new text
    /// must parse under the output's tag.
    pub fn modify_output_parameter(&self, name: &str, text: &str) -> Result<StepRecord, ModifyError> {
        let current = self
            .modifiable_outputs()?
            .parameters
            .get(name)
            .ok_or_else(|| ModifyError::UnknownOutput(name.to_string()))?;
        let value = ParameterValue::parse(current.type_tag, text).map_err(|source| {
            ModifyError::TypeMismatch {
                name: name.to_string(),
                source,
            }
        })?;
        let mut out = self.clone();
        if let Some(o) = out.outputs.as_mut() {
            o.parameters.insert(name.to_string(), value);
        }
        Ok(out)
    }

    /// Copy of this record with one output artifact pointed at `location`.
    pub fn modify_output_artifact(&self, name: &str, location: &str) -> Result<StepRecord, ModifyError> {
        let current = self
            .modifiable_outputs()?
            .artifacts
            .get(name)
            .ok_or_else(|| ModifyError::UnknownOutput(name.to_string()))?;
        let value = ArtifactValue {
            location: location.to_string(),
            optional: current.optional,
        };
        let mut out = self.clone();
        if let Some(o) = out.outputs.as_mut() {
            o.artifacts.insert(name.to_string(), value);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReuseError {
    #[error("reuse record `{key}` is {phase}; only Succeeded or Reused records can be reused")]
    NotReusable { key: String, phase: Phase },
}

/// Records supplied for reuse, indexed by key.
#[derive(Debug, Clone, Default)]
pub struct ReuseSet {
    by_key: BTreeMap<String, StepRecord>,
}

impl ReuseSet {
    /// Later records win when two share a key.
    pub fn new(records: impl IntoIterator<Item = StepRecord>) -> Result<Self, ReuseError> {
        let mut by_key = BTreeMap::new();
        for r in records {
            if !r.phase.has_outputs() || r.outputs.is_none() {
                return Err(ReuseError::NotReusable {
                    key: r.key,
                    phase: r.phase,
                });
            }
            by_key.insert(r.key.clone(), r);
        }
        Ok(ReuseSet { by_key })
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.by_key.keys().map(String::as_str)
    }

    pub fn records(&self) -> Vec<StepRecord> {
        self.by_key.values().cloned().collect()
    }

    /// Exact key match.
    pub fn resolve_reuse(&self, key: &str) -> Option<&StepRecord> {
        self.by_key.get(key)
    }
}
