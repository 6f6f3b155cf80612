//! On-disk workflow state.
//!
//! Layout under `<data-dir>/workflows/<wf-id>/`:
//!
//! ```text
//! status          workflow phase word
//! spec.yaml       effective spec (after --param overrides)
//! reuse.json      reuse records supplied at submission
//! lock            held by the process running the workflow
//! outputs/        entrypoint outputs
//! <step-key>/     one per step instance
//!     type  phase  meta.json
//!     inputs/{parameters,artifacts}/<name>
//!     outputs/{parameters,artifacts}/<name>
//!     script  log  workdir/      (Pod steps)
//! ```
//!
//! Every file is replaced by temp + rename, and `phase` is written last, so a
//! reader (or a crash) only ever sees complete words.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use opflow_core::ident::is_valid_key;
use opflow_core::record::{Failure, Phase, StepRecord};
use opflow_core::template::StepKind;
use opflow_core::value::{ArtifactValue, IoValues, ParameterValue, TypeTag};
use serde::{Deserialize, Serialize};

/// Names inside a workflow directory that step keys may not take.
pub const RESERVED_NAMES: [&str; 6] = ["status", "spec.yaml", "reuse.json", "lock", "outputs", "engine.log"];

#[derive(Debug, thiserror::Error)]
pub enum StateError {
    #[error("unknown workflow `{0}`")]
    UnknownWorkflow(String),
    #[error("workflow `{0}` already exists")]
    WorkflowExists(String),
    #[error("step `{key}`: illegal phase transition {from} -> {to}")]
    IllegalTransition { key: String, from: Phase, to: Phase },
    #[error("workflow `{0}` is locked by a running engine")]
    Locked(String),
    #[error("`{0}` cannot be used as a step key")]
    InvalidKey(String),
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("state I/O: {0}")]
    Io(#[from] io::Error),
}

/// Everything in a record except phase, kind and the value texts.
#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    key: String,
    keyed: bool,
    name: String,
    template: String,
    path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<String>,
    attempt: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slice_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    started_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ended_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    failure: Option<Failure>,
    inputs: ValueTags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    outputs: Option<ValueTags>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ValueTags {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    parameters: BTreeMap<String, TypeTag>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    optional_artifacts: BTreeSet<String>,
}

impl ValueTags {
    fn of(v: &IoValues) -> Self {
        ValueTags {
            parameters: v.parameters.iter().map(|(k, p)| (k.clone(), p.type_tag)).collect(),
            optional_artifacts: v
                .artifacts
                .iter()
                .filter(|(_, a)| a.optional)
                .map(|(k, _)| k.clone())
                .collect(),
        }
    }
}

/// Writes `bytes` to `path` through a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = dir.join(format!(".{name}.{}.tmp", uuid::Uuid::new_v4().simple()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    drop(f);
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

/// Parameter file content with exactly one trailing newline removed.
pub fn read_parameter_file(path: &Path) -> io::Result<String> {
    let mut text = fs::read_to_string(path)?;
    if text.ends_with('\n') {
        text.pop();
    }
    Ok(text)
}

fn read_word(path: &Path) -> Result<String, StateError> {
    Ok(fs::read_to_string(path)?.trim_end().to_string())
}

fn corrupt(path: &Path, message: impl Into<String>) -> StateError {
    StateError::Corrupt {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes `values` under `dir/{parameters,artifacts}`, removing stale entries.
fn write_values(dir: &Path, values: &IoValues) -> io::Result<()> {
    let params = dir.join("parameters");
    let arts = dir.join("artifacts");
    fs::create_dir_all(&params)?;
    fs::create_dir_all(&arts)?;
    for (name, p) in &values.parameters {
        let path = params.join(name);
        if fs::read(&path).ok().as_deref() != Some(p.text.as_bytes()) {
            write_atomic(&path, p.text.as_bytes())?;
        }
    }
    for (name, a) in &values.artifacts {
        let path = arts.join(name);
        if fs::read(&path).ok().as_deref() != Some(a.location.as_bytes()) {
            write_atomic(&path, a.location.as_bytes())?;
        }
    }
    prune(&params, |n| values.parameters.contains_key(n))?;
    prune(&arts, |n| values.artifacts.contains_key(n))
}

fn prune(dir: &Path, keep: impl Fn(&str) -> bool) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.starts_with('.') && !keep(&name) {
            fs::remove_file(entry.path())?;
        }
    }
    Ok(())
}

fn read_values(dir: &Path, tags: &ValueTags) -> Result<IoValues, StateError> {
    let mut values = IoValues::default();
    for (sub, is_param) in [("parameters", true), ("artifacts", false)] {
        let d = dir.join(sub);
        let entries = match fs::read_dir(&d) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
            Err(e) => return Err(e.into()),
        };
        for entry in entries {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') {
                continue;
            }
            if is_param {
                let text = read_parameter_file(&entry.path())?;
                let type_tag = tags.parameters.get(&name).copied().unwrap_or_default();
                values.parameters.insert(name, ParameterValue { text, type_tag });
            } else {
                let location = fs::read_to_string(entry.path())?;
                let optional = tags.optional_artifacts.contains(&name);
                values.artifacts.insert(name, ArtifactValue { location, optional });
            }
        }
    }
    Ok(values)
}

/// Exclusive claim on a workflow directory; released on drop.
#[derive(Debug)]
pub struct WorkflowLock {
    _file: fs::File,
}

/// Persistent workflow and step state under `<data-dir>/workflows`.
#[derive(Debug)]
pub struct StateStore {
    root: PathBuf,
    /// Last persisted phase per (workflow, key), for transition checks.
    phases: Mutex<HashMap<(String, String), Phase>>,
}

impl StateStore {
    pub fn new(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(StateStore {
            root,
            phases: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn workflow_dir(&self, wf_id: &str) -> PathBuf {
        self.root.join(wf_id)
    }

    pub fn step_dir(&self, wf_id: &str, key: &str) -> PathBuf {
        self.root.join(wf_id).join(key)
    }

    fn existing_workflow(&self, wf_id: &str) -> Result<PathBuf, StateError> {
        let dir = self.workflow_dir(wf_id);
        if !is_valid_key(wf_id) || !dir.join("status").is_file() {
            return Err(StateError::UnknownWorkflow(wf_id.to_string()));
        }
        Ok(dir)
    }

    pub fn exists(&self, wf_id: &str) -> bool {
        self.existing_workflow(wf_id).is_ok()
    }

    pub fn create_workflow(
        &self,
        wf_id: &str,
        spec_yaml: &str,
        reuse: &[StepRecord],
    ) -> Result<(), StateError> {
        if !is_valid_key(wf_id) {
            return Err(StateError::InvalidKey(wf_id.to_string()));
        }
        let dir = self.workflow_dir(wf_id);
        match fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(StateError::WorkflowExists(wf_id.to_string()))
            }
            Err(e) => return Err(e.into()),
        }
        write_atomic(&dir.join("spec.yaml"), spec_yaml.as_bytes())?;
        let reuse_json = serde_json::to_vec_pretty(reuse).map_err(io::Error::other)?;
        write_atomic(&dir.join("reuse.json"), &reuse_json)?;
        // status last: its presence marks the workflow as created.
        write_atomic(&dir.join("status"), Phase::Pending.as_str().as_bytes())?;
        Ok(())
    }

    pub fn list_workflows(&self) -> Result<Vec<String>, StateError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if self.exists(&name) {
                out.push(name);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn spec_text(&self, wf_id: &str) -> Result<String, StateError> {
        Ok(fs::read_to_string(self.existing_workflow(wf_id)?.join("spec.yaml"))?)
    }

    pub fn reuse_records(&self, wf_id: &str) -> Result<Vec<StepRecord>, StateError> {
        let path = self.existing_workflow(wf_id)?.join("reuse.json");
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| corrupt(&path, e.to_string())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn status(&self, wf_id: &str) -> Result<Phase, StateError> {
        let path = self.existing_workflow(wf_id)?.join("status");
        let word = read_word(&path)?;
        word.parse().map_err(|_| corrupt(&path, format!("bad phase word `{word}`")))
    }

    pub fn set_status(&self, wf_id: &str, phase: Phase) -> Result<(), StateError> {
        let dir = self.existing_workflow(wf_id)?;
        write_atomic(&dir.join("status"), phase.as_str().as_bytes())?;
        Ok(())
    }

    /// Takes the workflow's run lock without blocking.
    pub fn lock(&self, wf_id: &str) -> Result<WorkflowLock, StateError> {
        let dir = self.existing_workflow(wf_id)?;
        let file = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(dir.join("lock"))?;
        match file.try_lock() {
            Ok(()) => Ok(WorkflowLock { _file: file }),
            Err(fs::TryLockError::WouldBlock) => Err(StateError::Locked(wf_id.to_string())),
            Err(fs::TryLockError::Error(e)) => Err(e.into()),
        }
    }

    /// True while some process holds the run lock.
    pub fn is_locked(&self, wf_id: &str) -> Result<bool, StateError> {
        match self.lock(wf_id) {
            Ok(_) => Ok(false),
            Err(StateError::Locked(_)) => Ok(true),
            Err(e) => Err(e),
        }
    }

    /// Writes the step directory for `record`. Rejects transitions outside
    /// the phase machine relative to the last persisted phase.
    pub fn persist_step(&self, wf_id: &str, record: &StepRecord) -> Result<(), StateError> {
        let key = &record.key;
        if !is_valid_key(key) || RESERVED_NAMES.contains(&key.as_str()) {
            return Err(StateError::InvalidKey(key.clone()));
        }
        let wf_dir = self.existing_workflow(wf_id)?;
        let dir = wf_dir.join(key);
        let cache_key = (wf_id.to_string(), key.clone());
        let previous = {
            let cached = self.phases.lock().expect("phase cache").get(&cache_key).copied();
            match cached {
                Some(p) => Some(p),
                None => match read_word(&dir.join("phase")) {
                    Ok(w) => w.parse().ok(),
                    Err(_) => None,
                },
            }
        };
        let from = previous.unwrap_or(Phase::Pending);
        if !from.can_transition(record.phase) {
            return Err(StateError::IllegalTransition {
                key: key.clone(),
                from,
                to: record.phase,
            });
        }

        fs::create_dir_all(&dir)?;
        let kind_path = dir.join("type");
        if previous.is_none() || !kind_path.exists() {
            write_atomic(&kind_path, record.kind.as_str().as_bytes())?;
        }
        let outputs = record.outputs.as_ref().filter(|_| record.phase.has_outputs());
        let meta = Meta {
            key: key.clone(),
            keyed: record.keyed,
            name: record.name.clone(),
            template: record.template.clone(),
            path: record.path.clone(),
            parent: record.parent.clone(),
            attempt: record.attempt,
            slice_index: record.slice_index,
            started_at: record.started_at,
            ended_at: record.ended_at,
            failure: record.failure.clone(),
            inputs: ValueTags::of(&record.inputs),
            outputs: outputs.map(ValueTags::of),
        };
        let meta_bytes = serde_json::to_vec_pretty(&meta).map_err(io::Error::other)?;
        write_atomic(&dir.join("meta.json"), &meta_bytes)?;
        write_values(&dir.join("inputs"), &record.inputs)?;
        match outputs {
            Some(o) => write_values(&dir.join("outputs"), o)?,
            None => match fs::remove_dir_all(dir.join("outputs")) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            },
        }
        write_atomic(&dir.join("phase"), record.phase.as_str().as_bytes())?;
        self.phases
            .lock()
            .expect("phase cache")
            .insert(cache_key, record.phase);
        Ok(())
    }

    fn load_step_dir(&self, dir: &Path) -> Result<StepRecord, StateError> {
        let phase_path = dir.join("phase");
        let word = read_word(&phase_path)?;
        let phase: Phase = word
            .parse()
            .map_err(|_| corrupt(&phase_path, format!("bad phase word `{word}`")))?;
        let kind_path = dir.join("type");
        let kind_word = read_word(&kind_path)?;
        let kind = StepKind::parse_word(&kind_word)
            .ok_or_else(|| corrupt(&kind_path, format!("bad type word `{kind_word}`")))?;
        let meta_path = dir.join("meta.json");
        let meta: Meta = serde_json::from_slice(&fs::read(&meta_path)?)
            .map_err(|e| corrupt(&meta_path, e.to_string()))?;
        let inputs = read_values(&dir.join("inputs"), &meta.inputs)?;
        let outputs = if phase.has_outputs() {
            let tags = meta.outputs.unwrap_or_default();
            Some(read_values(&dir.join("outputs"), &tags)?)
        } else {
            None
        };
        Ok(StepRecord {
            key: meta.key,
            keyed: meta.keyed,
            name: meta.name,
            template: meta.template,
            kind,
            path: meta.path,
            parent: meta.parent,
            phase,
            attempt: meta.attempt,
            inputs,
            outputs,
            slice_index: meta.slice_index,
            started_at: meta.started_at,
            ended_at: meta.ended_at,
            failure: meta.failure,
        })
    }

    /// Exact-key lookup.
    pub fn query_step(&self, wf_id: &str, key: &str) -> Result<Option<StepRecord>, StateError> {
        let wf_dir = self.existing_workflow(wf_id)?;
        if !is_valid_key(key) || RESERVED_NAMES.contains(&key) {
            return Ok(None);
        }
        let dir = wf_dir.join(key);
        if !dir.join("phase").is_file() {
            return Ok(None);
        }
        self.load_step_dir(&dir).map(Some)
    }

    /// All step records of a workflow, ordered by key.
    pub fn list_steps(&self, wf_id: &str) -> Result<Vec<StepRecord>, StateError> {
        let wf_dir = self.existing_workflow(wf_id)?;
        let mut names = Vec::new();
        for entry in fs::read_dir(&wf_dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if RESERVED_NAMES.contains(&name.as_str()) || !is_valid_key(&name) {
                continue;
            }
            // A directory without a phase file was interrupted before its first persist.
            if entry.path().join("phase").is_file() {
                names.push(name);
            }
        }
        names.sort();
        names
            .iter()
            .map(|n| self.load_step_dir(&wf_dir.join(n)))
            .collect()
    }

    /// Succeeded or Reused records whose keys came from key templates.
    pub fn harvest_reuse(&self, wf_id: &str) -> Result<Vec<StepRecord>, StateError> {
        Ok(self
            .list_steps(wf_id)?
            .into_iter()
            .filter(|r| r.keyed && r.phase.has_outputs() && r.outputs.is_some())
            .collect())
    }

    pub fn write_workflow_outputs(&self, wf_id: &str, outputs: &IoValues) -> Result<(), StateError> {
        let dir = self.existing_workflow(wf_id)?.join("outputs");
        write_values(&dir, outputs)?;
        let tags = serde_json::to_vec_pretty(&ValueTags::of(outputs)).map_err(io::Error::other)?;
        write_atomic(&dir.join(".tags.json"), &tags)?;
        Ok(())
    }

    pub fn workflow_outputs(&self, wf_id: &str) -> Result<Option<IoValues>, StateError> {
        let dir = self.existing_workflow(wf_id)?.join("outputs");
        let tags_path = dir.join(".tags.json");
        let tags: ValueTags = match fs::read(&tags_path) {
            Ok(b) => serde_json::from_slice(&b).map_err(|e| corrupt(&tags_path, e.to_string()))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        read_values(&dir, &tags).map(Some)
    }
}
