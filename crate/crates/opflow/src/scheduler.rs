//! Runs a validated workflow: ordering, conditions, slices, retries, reuse.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use opflow_core::expr::{evaluate_condition, render_placeholders, ExprError, Scope};
use opflow_core::graph::{infer_dag_dependencies, referenced_siblings, topological_order};
use opflow_core::ident::is_valid_key;
use opflow_core::policy::{apply_fault_policy, AttemptResult, FailureKind, FaultDecision};
use opflow_core::record::{Failure, Phase, ReuseError, ReuseSet, StepRecord};
use opflow_core::signature::{typecheck_io, Signature, TypecheckError};
use opflow_core::slices::{
    aggregate_slice_outputs, expand_slices, item_field, split_list, stacked_signature, SliceSource,
};
use opflow_core::template::{CompositeTemplate, OpTemplate, ScriptTemplate, StepDef, StepKind, ValueRef};
use opflow_core::validate::{validate_workflow, ValidationReport};
use opflow_core::value::{ArtifactValue, IoValues, ParameterValue};
use opflow_core::workflow::WorkflowSpec;

use crate::clock::{Clock, SystemClock};
use crate::executor::{
    execute_with, script_scope, Executor, LocalExecutor, ProcessRunner, ScriptRunner, StepFiles,
};
use crate::spec_io::{parse_spec, spec_to_yaml};
use crate::state::{StateError, StateStore, RESERVED_NAMES};
use crate::storage::{copy_tree, FsStorage, StorageClient};

const WORKER_STACK: usize = 16 << 20;
const ROOT_STACK: usize = 256 << 20;

#[derive(Clone)]
pub struct RunConfig {
    /// Upper bound on concurrently running scripts, and on in-flight
    /// children of any one DAG or slice group.
    pub parallelism: usize,
    /// Occurrences of one template name allowed on the instantiation stack.
    pub max_recursion_depth: usize,
    pub default_executor: String,
    pub clock: Arc<dyn Clock>,
    pub retry_backoff: Duration,
    /// Reference interpreter: one thing at a time, in a fixed order.
    pub sequential: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            parallelism: 16,
            max_recursion_depth: 100,
            default_executor: "local".into(),
            clock: Arc::new(SystemClock),
            retry_backoff: Duration::from_secs(1),
            sequential: false,
        }
    }
}

impl std::fmt::Debug for RunConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunConfig")
            .field("parallelism", &self.parallelism)
            .field("max_recursion_depth", &self.max_recursion_depth)
            .field("default_executor", &self.default_executor)
            .field("retry_backoff", &self.retry_backoff)
            .field("sequential", &self.sequential)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowResult {
    pub workflow_id: String,
    pub phase: Phase,
    /// Final record of every step instance, ordered by path.
    pub records: Vec<StepRecord>,
    pub outputs: Option<IoValues>,
    /// Run-level error (recursion limit, persistence failure).
    pub error: Option<String>,
}

impl WorkflowResult {
    pub fn record(&self, path: &str) -> Option<&StepRecord> {
        self.records.iter().find(|r| r.path == path)
    }

    pub fn by_key(&self, key: &str) -> Option<&StepRecord> {
        self.records.iter().find(|r| r.key == key)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("workflow failed validation:\n{0}")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Reuse(#[from] ReuseError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("stored spec is unreadable: {0}")]
    Spec(String),
    #[error("spawning the run thread: {0}")]
    Thread(std::io::Error),
    #[error("workflow `{0}` is {1}, not Pending")]
    NotPending(String, Phase),
}

pub const RECURSION_LIMIT_EXCEEDED: &str = "RecursionLimitExceeded";

/// `<name>-<8 hex>`.
pub fn new_workflow_id(name: &str) -> String {
    format!("{name}-{}", short_uuid())
}

fn short_uuid() -> String {
    let mut s = uuid::Uuid::new_v4().simple().to_string();
    s.truncate(8);
    s
}

/// Renders and evaluates a step's `when`; absent means true.
pub fn evaluate_when(step: &StepDef, scope: &Scope) -> Result<bool, ExprError> {
    match &step.when {
        Some(w) => evaluate_condition(w, scope),
        None => Ok(true),
    }
}

/// The workflow engine: state, storage, executors and a script runner.
pub struct Engine {
    state: Arc<StateStore>,
    storage: Arc<dyn StorageClient>,
    executors: BTreeMap<String, Arc<dyn Executor>>,
    runner: Arc<dyn ScriptRunner>,
}

impl Engine {
    pub fn new(state: Arc<StateStore>, storage: Arc<dyn StorageClient>) -> Self {
        let mut executors: BTreeMap<String, Arc<dyn Executor>> = BTreeMap::new();
        executors.insert("local".into(), Arc::new(LocalExecutor));
        Engine {
            state,
            storage,
            executors,
            runner: Arc::new(ProcessRunner),
        }
    }

    /// State under `<data_dir>/workflows`, artifacts under `<data_dir>/artifacts`.
    pub fn open(data_dir: &Path) -> std::io::Result<Self> {
        let state = StateStore::new(data_dir.join("workflows"))?;
        let storage = FsStorage::new(data_dir.join("artifacts"))?;
        Ok(Engine::new(Arc::new(state), Arc::new(storage)))
    }

    pub fn with_executor(mut self, executor: Arc<dyn Executor>) -> Self {
        self.executors.insert(executor.name().to_string(), executor);
        self
    }

    pub fn with_runner(mut self, runner: Arc<dyn ScriptRunner>) -> Self {
        self.runner = runner;
        self
    }

    pub fn state(&self) -> &StateStore {
        &self.state
    }

    pub fn storage(&self) -> &dyn StorageClient {
        self.storage.as_ref()
    }

    pub fn has_executor(&self, name: &str) -> bool {
        self.executors.contains_key(name)
    }

    /// Validates `spec`, allocates a workflow id and writes the workflow
    /// directory. Nothing runs yet.
    pub fn prepare(&self, spec: &WorkflowSpec, reuse: &[StepRecord]) -> Result<String, RunError> {
        let report = validate_workflow(spec);
        if !report.is_accepted() {
            return Err(RunError::Invalid(report));
        }
        ReuseSet::new(reuse.iter().cloned())?;
        let yaml = spec_to_yaml(spec).map_err(|e| RunError::Spec(e.to_string()))?;
        loop {
            let id = new_workflow_id(&spec.name);
            match self.state.create_workflow(&id, &yaml, reuse) {
                Ok(()) => return Ok(id),
                Err(StateError::WorkflowExists(_)) => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Runs a prepared workflow to completion, holding its lock throughout.
    pub fn run_prepared(&self, wf_id: &str, config: &RunConfig) -> Result<WorkflowResult, RunError> {
        let _lock = self.state.lock(wf_id)?;
        let status = self.state.status(wf_id)?;
        if status != Phase::Pending {
            return Err(RunError::NotPending(wf_id.to_string(), status));
        }
        let spec = parse_spec(&self.state.spec_text(wf_id)?).map_err(|e| RunError::Spec(e.to_string()))?;
        let reuse = ReuseSet::new(self.state.reuse_records(wf_id)?)?;
        self.state.set_status(wf_id, Phase::Running)?;
        let run = Run::new(self, &spec, config, wf_id, reuse);
        let result = std::thread::scope(|s| {
            std::thread::Builder::new()
                .name("opflow-root".into())
                .stack_size(ROOT_STACK)
                .spawn_scoped(s, || run.run_root())
                .map(|h| h.join().expect("run thread panicked"))
        })
        .map_err(RunError::Thread)?;
        if let Some(outputs) = &result.outputs {
            if let Err(e) = self.state.write_workflow_outputs(wf_id, outputs) {
                run.abort(format!("writing workflow outputs: {e}"));
            }
        }
        let error = run.error.lock().expect("error slot").clone();
        let phase = if error.is_none() && result.phase == Phase::Succeeded {
            Phase::Succeeded
        } else {
            Phase::Failed
        };
        self.state.set_status(wf_id, phase)?;
        let records: Vec<StepRecord> = run.records.lock().expect("records").values().cloned().collect();
        Ok(WorkflowResult {
            workflow_id: wf_id.to_string(),
            phase,
            records,
            outputs: result.outputs,
            error,
        })
    }

    pub fn run_workflow(
        &self,
        spec: &WorkflowSpec,
        config: &RunConfig,
        reuse: &[StepRecord],
    ) -> Result<WorkflowResult, RunError> {
        let id = self.prepare(spec, reuse)?;
        self.run_prepared(&id, config)
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore") += 1;
        self.0.cv.notify_one();
    }
}

/// Result of one step as its siblings see it.
#[derive(Debug, Clone)]
struct Outcome {
    phase: Phase,
    outputs: Option<IoValues>,
    /// Failed without tolerance, or skipped because something upstream was:
    /// dependents must not run.
    blocks: bool,
}

/// Phase and outputs produced by instantiating a template.
struct Settled {
    phase: Phase,
    outputs: Option<IoValues>,
}

impl Settled {
    fn failed() -> Self {
        Settled {
            phase: Phase::Failed,
            outputs: None,
        }
    }
}

/// Identity and placement of one step instance.
#[derive(Debug, Clone)]
struct Base {
    key: String,
    keyed: bool,
    name: String,
    template: String,
    kind: StepKind,
    path: String,
    parent: Option<String>,
    slice_index: Option<u32>,
}

impl Base {
    fn record(&self, phase: Phase, attempt: u32, inputs: &IoValues) -> StepRecord {
        StepRecord {
            key: self.key.clone(),
            keyed: self.keyed,
            name: self.name.clone(),
            template: self.template.clone(),
            kind: self.kind,
            path: self.path.clone(),
            parent: self.parent.clone(),
            phase,
            attempt,
            inputs: inputs.clone(),
            outputs: None,
            slice_index: self.slice_index,
            started_at: None,
            ended_at: None,
            failure: None,
        }
    }
}

/// A composite body being executed.
struct Frame<'a> {
    template: &'a CompositeTemplate,
    dag: bool,
    inputs: &'a IoValues,
    path: &'a str,
    parent_key: Option<&'a str>,
    stack: &'a [&'a str],
}

impl Frame<'_> {
    fn child_path(&self, name: &str) -> String {
        if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}/{name}", self.path)
        }
    }

    fn sibling_prefix(&self) -> &'static str {
        if self.dag {
            "tasks"
        } else {
            "steps"
        }
    }
}

enum Bound {
    Parameter(ParameterValue),
    Artifact(ArtifactValue),
}

struct Run<'e> {
    engine: &'e Engine,
    spec: &'e WorkflowSpec,
    config: &'e RunConfig,
    wf_id: String,
    reuse: ReuseSet,
    globals: IoValues,
    sem: Semaphore,
    records: Mutex<BTreeMap<String, StepRecord>>,
    keys: Mutex<HashSet<String>>,
    error: Mutex<Option<String>>,
}

impl<'e> Run<'e> {
    fn new(
        engine: &'e Engine,
        spec: &'e WorkflowSpec,
        config: &'e RunConfig,
        wf_id: &str,
        reuse: ReuseSet,
    ) -> Self {
        let mut globals = IoValues::default();
        for (name, decl) in &spec.global_inputs.parameters {
            if let Some(text) = &decl.default {
                let value = ParameterValue::parse(decl.type_tag, text)
                    .unwrap_or_else(|_| ParameterValue::string(text.clone()));
                globals.parameters.insert(name.clone(), value);
            }
        }
        for (name, decl) in &spec.global_inputs.artifacts {
            if let Some(loc) = &decl.default_location {
                globals.artifacts.insert(
                    name.clone(),
                    ArtifactValue {
                        location: loc.clone(),
                        optional: decl.optional,
                    },
                );
            }
        }
        Run {
            engine,
            spec,
            config,
            wf_id: wf_id.to_string(),
            reuse,
            globals,
            sem: Semaphore::new(config.parallelism),
            records: Mutex::new(BTreeMap::new()),
            keys: Mutex::new(HashSet::new()),
            error: Mutex::new(None),
        }
    }

    fn now(&self) -> u64 {
        self.config.clock.now_ms()
    }

    fn abort(&self, message: String) {
        let mut slot = self.error.lock().expect("error slot");
        if slot.is_none() {
            *slot = Some(message);
        }
    }

    fn aborted(&self) -> bool {
        self.error
            .lock()
            .expect("error slot")
            .as_deref()
            .is_some_and(|e| !e.starts_with(RECURSION_LIMIT_EXCEEDED))
    }

    fn persist(&self, record: &StepRecord) {
        if let Err(e) = self.engine.state.persist_step(&self.wf_id, record) {
            self.abort(format!("persisting step `{}`: {e}", record.key));
        }
        self.records
            .lock()
            .expect("records")
            .insert(record.path.clone(), record.clone());
    }

    fn persist_skipped(&self, base: &Base) {
        let now = self.now();
        let mut r = base.record(Phase::Skipped, 0, &IoValues::default());
        r.started_at = Some(now);
        r.ended_at = Some(now);
        self.persist(&r);
    }

    /// A failure before anything could run: Running then Failed.
    fn fail_early(&self, base: &Base, inputs: &IoValues, message: String) -> Settled {
        let now = self.now();
        let mut r = base.record(Phase::Running, 1, inputs);
        r.started_at = Some(now);
        self.persist(&r);
        r.phase = Phase::Failed;
        r.ended_at = Some(self.now());
        r.failure = Some(Failure::fatal(message));
        self.persist(&r);
        Settled::failed()
    }

    /// Registers a resolved key; errors on bad syntax or a duplicate.
    fn claim_key(&self, key: &str) -> Result<(), String> {
        if !is_valid_key(key) || RESERVED_NAMES.contains(&key) {
            return Err(format!("`{key}` is not a valid step key"));
        }
        if !self.keys.lock().expect("keys").insert(key.to_string()) {
            return Err(format!("duplicate step key `{key}`"));
        }
        Ok(())
    }

    fn generated_key(&self, name: &str) -> String {
        loop {
            let key = format!("{name}-{}", short_uuid());
            if self.keys.lock().expect("keys").insert(key.clone()) {
                return key;
            }
        }
    }

    fn run_root(&self) -> Settled {
        let spec = self.spec;
        let Some(entry) = spec.template(&spec.entrypoint) else {
            self.abort(format!("entrypoint `{}` does not resolve", spec.entrypoint));
            return Settled::failed();
        };
        let mut raw = IoValues::default();
        for name in entry.inputs().parameters.keys() {
            if let Some(v) = self.globals.parameters.get(name) {
                raw.parameters.insert(name.clone(), v.clone());
            }
        }
        for name in entry.inputs().artifacts.keys() {
            if let Some(v) = self.globals.artifacts.get(name) {
                raw.artifacts.insert(name.clone(), v.clone());
            }
        }
        match entry {
            OpTemplate::Script(_) => {
                let base = Base {
                    key: self.generated_key(entry.name()),
                    keyed: false,
                    name: entry.name().to_string(),
                    template: entry.name().to_string(),
                    kind: StepKind::Pod,
                    path: entry.name().to_string(),
                    parent: None,
                    slice_index: None,
                };
                self.instantiate(&[], entry, &base, raw, None)
            }
            OpTemplate::Steps(c) | OpTemplate::Dag(c) => {
                let inputs = match typecheck_io(&c.inputs, &raw) {
                    Ok(v) => v,
                    Err(e) => {
                        self.abort(format!("entrypoint inputs: {e}"));
                        return Settled::failed();
                    }
                };
                let frame = Frame {
                    template: c,
                    dag: matches!(entry, OpTemplate::Dag(_)),
                    inputs: &inputs,
                    path: "",
                    parent_key: None,
                    stack: &[entry.name()],
                };
                let (ok, outcomes) = self.run_body(&frame);
                if !ok {
                    return Settled::failed();
                }
                match self.bind_template_outputs(&frame, &outcomes) {
                    Ok(outputs) => Settled {
                        phase: Phase::Succeeded,
                        outputs: Some(outputs),
                    },
                    Err(e) => {
                        self.abort(format!("entrypoint outputs: {e}"));
                        Settled::failed()
                    }
                }
            }
        }
    }

    /// Runs every member of a body. Returns whether no member blocks, and
    /// the outcomes by member name.
    fn run_body(&self, frame: &Frame<'_>) -> (bool, BTreeMap<String, Outcome>) {
        let body = &frame.template.body;
        let mut outcomes: BTreeMap<String, Outcome> = BTreeMap::new();
        if !frame.dag {
            let mut blocked = false;
            for step in body {
                let o = self.run_member(frame, step, &outcomes, blocked);
                blocked |= o.blocks;
                outcomes.insert(step.name.clone(), o);
            }
        } else {
            let edges = infer_dag_dependencies(frame.template).unwrap_or_default();
            if self.config.sequential || self.config.parallelism <= 1 {
                let names: Vec<&str> = body.iter().map(|s| s.name.as_str()).collect();
                let edge_refs: Vec<(&str, &str)> =
                    edges.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
                let order = topological_order(&names, &edge_refs).unwrap_or_default();
                for name in order {
                    let Some(step) = frame.template.member(&name) else {
                        continue;
                    };
                    let blocked = edges
                        .iter()
                        .any(|(a, b)| *b == name && outcomes.get(a).is_some_and(|o| o.blocks));
                    let o = self.run_member(frame, step, &outcomes, blocked);
                    outcomes.insert(name, o);
                }
            } else {
                outcomes = self.run_dag_concurrent(frame, &edges);
            }
        }
        let ok = !outcomes.values().any(|o| o.blocks);
        (ok, outcomes)
    }

    fn run_dag_concurrent(
        &self,
        frame: &Frame<'_>,
        edges: &[(String, String)],
    ) -> BTreeMap<String, Outcome> {
        let body = &frame.template.body;
        let index: BTreeMap<&str, usize> = body
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.as_str(), i))
            .collect();
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); body.len()];
        let mut succs: Vec<Vec<usize>> = vec![Vec::new(); body.len()];
        for (a, b) in edges {
            if let (Some(&ia), Some(&ib)) = (index.get(a.as_str()), index.get(b.as_str())) {
                preds[ib].push(ia);
                succs[ia].push(ib);
            }
        }
        let mut waiting: Vec<usize> = preds.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..body.len()).filter(|i| waiting[*i] == 0).collect();
        let mut outcomes: BTreeMap<String, Outcome> = BTreeMap::new();
        let limit = self.config.parallelism.max(1);

        std::thread::scope(|s| {
            let (tx, rx) = mpsc::channel::<(usize, Outcome)>();
            let mut in_flight = 0usize;
            let mut settled: VecDeque<(usize, Outcome)> = VecDeque::new();
            loop {
                while let Some((i, o)) = settled.pop_front() {
                    for &j in &succs[i] {
                        waiting[j] -= 1;
                        if waiting[j] == 0 {
                            ready.insert(j);
                        }
                    }
                    outcomes.insert(body[i].name.clone(), o);
                }
                while in_flight < limit {
                    let Some(i) = ready.pop_first() else { break };
                    let step = &body[i];
                    let blocked = preds[i]
                        .iter()
                        .any(|p| outcomes.get(&body[*p].name).is_some_and(|o| o.blocks));
                    if blocked {
                        let o = self.run_member(frame, step, &outcomes, true);
                        settled.push_back((i, o));
                        continue;
                    }
                    let needed: BTreeMap<String, Outcome> = referenced_siblings(step)
                        .into_iter()
                        .filter_map(|n| outcomes.get(&n).map(|o| (n, o.clone())))
                        .collect();
                    let tx = tx.clone();
                    std::thread::Builder::new()
                        .stack_size(WORKER_STACK)
                        .spawn_scoped(s, move || {
                            let o = self.run_member(frame, step, &needed, false);
                            let _ = tx.send((i, o));
                        })
                        .expect("spawning a task thread");
                    in_flight += 1;
                }
                if !settled.is_empty() {
                    continue;
                }
                if in_flight == 0 {
                    break;
                }
                let got = rx.recv().expect("task threads hold a sender");
                in_flight -= 1;
                settled.push_back(got);
            }
        });
        outcomes
    }

    /// Placeholder scope for a member's `when` and `key_template`.
    fn member_scope(
        &self,
        frame: &Frame<'_>,
        step: &StepDef,
        siblings: &BTreeMap<String, Outcome>,
    ) -> Scope {
        let mut scope = Scope::new()
            .with("workflow.name", self.spec.name.clone())
            .with("workflow.id", self.wf_id.clone());
        for (name, p) in &frame.inputs.parameters {
            scope.insert(format!("inputs.parameters.{name}"), p.text.clone());
        }
        let prefix = frame.sibling_prefix();
        for sib in referenced_siblings(step) {
            if let Some(outputs) = siblings.get(&sib).and_then(|o| o.outputs.as_ref()) {
                for (n, p) in &outputs.parameters {
                    scope.insert(format!("{prefix}.{sib}.outputs.parameters.{n}"), p.text.clone());
                }
            }
        }
        scope
    }

    fn run_member(
        &self,
        frame: &Frame<'_>,
        step: &StepDef,
        siblings: &BTreeMap<String, Outcome>,
        blocked: bool,
    ) -> Outcome {
        let tolerated = |phase: Phase| !(phase == Phase::Failed && !step.continue_on_failed);
        let Some(template) = self.spec.template(&step.template) else {
            self.abort(format!("template `{}` does not resolve", step.template));
            return Outcome {
                phase: Phase::Failed,
                outputs: None,
                blocks: true,
            };
        };
        if self.aborted() {
            return Outcome {
                phase: Phase::Failed,
                outputs: None,
                blocks: true,
            };
        }
        let scope = self.member_scope(frame, step, siblings);
        let rendered_key = step
            .key_template
            .as_ref()
            .map(|kt| render_placeholders(kt, &scope));
        let mut base = Base {
            key: String::new(),
            keyed: false,
            name: step.name.clone(),
            template: step.template.clone(),
            kind: if step.is_sliced() {
                StepKind::Steps
            } else {
                template.kind()
            },
            path: frame.child_path(&step.name),
            parent: frame.parent_key.map(str::to_string),
            slice_index: None,
        };
        let key_error = match rendered_key {
            None => {
                base.key = self.generated_key(&step.name);
                None
            }
            Some(Ok(k)) => match self.claim_key(&k) {
                Ok(()) => {
                    base.key = k;
                    base.keyed = true;
                    None
                }
                Err(e) => {
                    base.key = self.generated_key(&step.name);
                    Some(e)
                }
            },
            Some(Err(e)) => {
                base.key = self.generated_key(&step.name);
                Some(format!("rendering key: {e}"))
            }
        };

        if blocked {
            self.persist_skipped(&base);
            return Outcome {
                phase: Phase::Skipped,
                outputs: None,
                blocks: true,
            };
        }
        let settle = |s: Settled| Outcome {
            blocks: !tolerated(s.phase),
            phase: s.phase,
            outputs: s.outputs,
        };
        if let Some(e) = key_error {
            return settle(self.fail_early(&base, &IoValues::default(), e));
        }
        match evaluate_when(step, &scope) {
            Ok(true) => {}
            Ok(false) => {
                self.persist_skipped(&base);
                return Outcome {
                    phase: Phase::Skipped,
                    outputs: None,
                    blocks: false,
                };
            }
            Err(e) => {
                return settle(self.fail_early(&base, &IoValues::default(), format!("when: {e}")))
            }
        }
        let raw = match self.bind_step_inputs(frame, step, template.inputs(), siblings, None) {
            Ok(v) => v,
            Err(e) => return settle(self.fail_early(&base, &IoValues::default(), e)),
        };
        if step.is_sliced() {
            settle(self.run_slice_group(frame, step, template, &base, raw))
        } else {
            settle(self.instantiate(frame.stack, template, &base, raw, Some(step)))
        }
    }

    fn resolve(
        &self,
        frame: &Frame<'_>,
        vref: &ValueRef,
        siblings: &BTreeMap<String, Outcome>,
        item: Option<&str>,
        want_artifact: bool,
    ) -> Result<Option<Bound>, String> {
        let from_io = |io: &IoValues, name: &str| {
            if want_artifact {
                io.artifacts.get(name).cloned().map(Bound::Artifact)
            } else {
                io.parameters.get(name).cloned().map(Bound::Parameter)
            }
        };
        Ok(match vref {
            ValueRef::Value(t) => Some(Bound::Parameter(ParameterValue::string(t.clone()))),
            ValueRef::Artifact(a) => Some(Bound::Artifact(a.clone())),
            ValueRef::WorkflowInput(n) => from_io(&self.globals, n),
            ValueRef::TemplateInput(n) => from_io(frame.inputs, n),
            ValueRef::StepOutput { step, name } => {
                match siblings.get(step).and_then(|o| o.outputs.as_ref()) {
                    Some(outputs) => from_io(outputs, name),
                    None => None,
                }
            }
            ValueRef::Item => {
                let item = item.ok_or("`item` outside a slice instance")?;
                if want_artifact {
                    Some(Bound::Artifact(ArtifactValue::at(item)))
                } else {
                    Some(Bound::Parameter(ParameterValue::string(item)))
                }
            }
            ValueRef::ItemField(f) => {
                let item = item.ok_or("`item` outside a slice instance")?;
                let text = item_field(item, f).map_err(|e| e.to_string())?;
                Some(Bound::Parameter(ParameterValue::string(text)))
            }
        })
    }

    /// Resolves a step's bindings. Unavailable sources are left out so the
    /// typecheck can inject defaults; a required input bound to an
    /// unavailable output is an error.
    fn bind_step_inputs(
        &self,
        frame: &Frame<'_>,
        step: &StepDef,
        sig: &Signature,
        siblings: &BTreeMap<String, Outcome>,
        item: Option<&str>,
    ) -> Result<IoValues, String> {
        let mut raw = IoValues::default();
        for (name, vref) in &step.input_bindings {
            if item.is_none() && vref.uses_item() {
                continue;
            }
            let want_artifact = sig.artifacts.contains_key(name);
            match self.resolve(frame, vref, siblings, item, want_artifact)? {
                Some(Bound::Parameter(p)) => {
                    raw.parameters.insert(name.clone(), p);
                }
                Some(Bound::Artifact(a)) => {
                    raw.artifacts.insert(name.clone(), a);
                }
                None => {
                    if let ValueRef::StepOutput { step: s, name: n } = vref {
                        if !sig.may_omit(name) {
                            return Err(format!(
                                "UnavailableOutput: input `{name}` reads `{s}.{n}`, which has no value"
                            ));
                        }
                    }
                }
            }
        }
        Ok(raw)
    }

    fn bind_template_outputs(
        &self,
        frame: &Frame<'_>,
        outcomes: &BTreeMap<String, Outcome>,
    ) -> Result<IoValues, String> {
        let c = frame.template;
        let mut raw = IoValues::default();
        for (name, vref) in &c.output_bindings {
            let want_artifact = c.outputs.artifacts.contains_key(name);
            match self.resolve(frame, vref, outcomes, None, want_artifact)? {
                Some(Bound::Parameter(p)) => {
                    raw.parameters.insert(name.clone(), p);
                }
                Some(Bound::Artifact(a)) => {
                    raw.artifacts.insert(name.clone(), a);
                }
                None => {}
            }
        }
        typecheck_io(&c.outputs, &raw).map_err(|e| match e {
            TypecheckError::MissingInput { name } => {
                format!("UnavailableOutput: output `{name}` has no value")
            }
            e => e.to_string(),
        })
    }

    /// Reuse check plus type check, then hands off by template kind.
    fn instantiate(
        &self,
        stack: &[&str],
        template: &OpTemplate,
        base: &Base,
        raw: IoValues,
        step: Option<&StepDef>,
    ) -> Settled {
        let name = template.name();
        let depth = stack.iter().filter(|n| **n == name).count();
        if depth >= self.config.max_recursion_depth {
            let msg = format!(
                "{RECURSION_LIMIT_EXCEEDED}: template `{name}` already occurs {depth} times on the stack"
            );
            self.abort(msg.clone());
            return self.fail_early(base, &raw, msg);
        }
        let inputs = match typecheck_io(template.inputs(), &raw) {
            Ok(v) => v,
            Err(e) => return self.fail_early(base, &raw, format!("inputs: {e}")),
        };
        if let Some(settled) = self.try_reuse(base, &inputs, template.outputs()) {
            return settled;
        }
        match template {
            OpTemplate::Script(t) => self.run_script(base, t, inputs, step),
            OpTemplate::Steps(c) | OpTemplate::Dag(c) => {
                let mut inner: Vec<&str> = stack.to_vec();
                inner.push(name);
                self.run_composite(&inner, c, matches!(template, OpTemplate::Dag(_)), base, inputs)
            }
        }
    }

    fn try_reuse(&self, base: &Base, inputs: &IoValues, outputs_sig: &Signature) -> Option<Settled> {
        let rec = self.reuse.resolve_reuse(&base.key)?;
        let outputs = rec.outputs.clone().unwrap_or_default();
        if let Err(e) = typecheck_io(outputs_sig, &outputs) {
            return Some(self.fail_early(
                base,
                inputs,
                format!("reused record `{}` does not fit the template outputs: {e}", rec.key),
            ));
        }
        let now = self.now();
        let mut r = base.record(Phase::Reused, 0, inputs);
        r.outputs = Some(outputs.clone());
        r.started_at = Some(now);
        r.ended_at = Some(now);
        self.persist(&r);
        Some(Settled {
            phase: Phase::Reused,
            outputs: Some(outputs),
        })
    }

    fn run_composite(
        &self,
        stack: &[&str],
        c: &CompositeTemplate,
        dag: bool,
        base: &Base,
        inputs: IoValues,
    ) -> Settled {
        let mut r = base.record(Phase::Running, 1, &inputs);
        r.started_at = Some(self.now());
        self.persist(&r);
        let frame = Frame {
            template: c,
            dag,
            inputs: &inputs,
            path: &base.path,
            parent_key: Some(&base.key),
            stack,
        };
        let (ok, outcomes) = self.run_body(&frame);
        let result = if ok {
            self.bind_template_outputs(&frame, &outcomes)
        } else {
            let failed: Vec<&str> = outcomes
                .iter()
                .filter(|(_, o)| o.blocks && o.phase == Phase::Failed)
                .map(|(n, _)| n.as_str())
                .collect();
            Err(format!("member failure: {}", failed.join(", ")))
        };
        r.ended_at = Some(self.now());
        match result {
            Ok(outputs) => {
                r.phase = Phase::Succeeded;
                r.outputs = Some(outputs.clone());
                self.persist(&r);
                Settled {
                    phase: Phase::Succeeded,
                    outputs: Some(outputs),
                }
            }
            Err(message) => {
                r.phase = Phase::Failed;
                r.failure = Some(Failure::fatal(message));
                self.persist(&r);
                Settled::failed()
            }
        }
    }

    fn materialize_inputs(
        &self,
        t: &ScriptTemplate,
        inputs: &IoValues,
        workdir: &Path,
    ) -> Result<(), String> {
        for (name, a) in &inputs.artifacts {
            if a.location.is_empty() {
                continue;
            }
            let Some(mount) = t.input_artifact_mounts.get(name) else {
                continue;
            };
            let dest = workdir.join(mount);
            let res = if a.is_local_path() {
                copy_tree(Path::new(&a.location), &dest).map_err(|e| e.to_string())
            } else {
                self.engine
                    .storage
                    .download(&a.location, &dest)
                    .map_err(|e| e.to_string())
            };
            res.map_err(|e| format!("input artifact `{name}`: {e}"))?;
        }
        Ok(())
    }

    fn artifact_key(&self, step_key: &str, name: &str) -> String {
        format!("workflows/{}/{step_key}/{name}", self.wf_id)
    }

    fn upload_outputs(
        &self,
        key: &str,
        t: &ScriptTemplate,
        params: BTreeMap<String, ParameterValue>,
        artifacts: BTreeMap<String, PathBuf>,
    ) -> Result<IoValues, String> {
        let mut raw = IoValues {
            parameters: params,
            artifacts: BTreeMap::new(),
        };
        for (name, path) in artifacts {
            let k = self.artifact_key(key, &name);
            self.engine
                .storage
                .upload(&path, &k)
                .map_err(|e| format!("output artifact `{name}`: {e}"))?;
            let optional = t.outputs.artifacts.get(&name).is_some_and(|d| d.optional);
            raw.artifacts.insert(name, ArtifactValue { location: k, optional });
        }
        typecheck_io(&t.outputs, &raw).map_err(|e| format!("outputs: {e}"))
    }

    fn run_script(
        &self,
        base: &Base,
        t: &ScriptTemplate,
        inputs: IoValues,
        step: Option<&StepDef>,
    ) -> Settled {
        let executor_name = step
            .and_then(|s| s.executor.as_deref())
            .unwrap_or(&self.config.default_executor);
        let Some(executor) = self.engine.executors.get(executor_name) else {
            return self.fail_early(base, &inputs, format!("unknown executor `{executor_name}`"));
        };
        let rendered = executor.render(t);
        let default_step;
        let step = match step {
            Some(s) => s,
            None => {
                default_step = StepDef::new(&base.name, &base.template);
                &default_step
            }
        };
        let files = StepFiles::in_dir(&self.engine.state.step_dir(&self.wf_id, &base.key));
        let scope = script_scope(&inputs, &self.spec.name, &self.wf_id);
        let timeout = step.timeout_seconds.map(Duration::from_secs);
        let mut r = base.record(Phase::Running, 1, &inputs);
        r.started_at = Some(self.now());

        let mut attempt = 1u32;
        loop {
            r.attempt = attempt;
            self.persist(&r);
            let _ = fs::remove_dir_all(&files.workdir);
            if let Err(e) = fs::create_dir_all(&files.workdir) {
                return self.finish_failed(r, FailureKind::Fatal, format!("workdir: {e}"));
            }
            if let Err(e) = self.materialize_inputs(t, &inputs, &files.workdir) {
                return self.finish_failed(r, FailureKind::Fatal, e);
            }
            let exec = {
                let _permit = self.sem.acquire();
                execute_with(
                    self.engine.runner.as_ref(),
                    &rendered,
                    &files,
                    &scope,
                    timeout,
                    (&base.path, &base.key, attempt),
                )
            };
            let outcome = match exec {
                Ok(o) => o,
                Err(e) => return self.finish_failed(r, FailureKind::Fatal, e.to_string()),
            };
            match outcome.status {
                Ok(()) => {
                    let collected = outcome.outputs.unwrap_or_default();
                    return match self.upload_outputs(&base.key, t, collected.parameters, collected.artifacts) {
                        Ok(outputs) => {
                            r.phase = Phase::Succeeded;
                            r.ended_at = Some(self.now());
                            r.outputs = Some(outputs.clone());
                            self.persist(&r);
                            Settled {
                                phase: Phase::Succeeded,
                                outputs: Some(outputs),
                            }
                        }
                        Err(e) => self.finish_failed(r, FailureKind::Fatal, e),
                    };
                }
                Err(kind) => {
                    let decision = apply_fault_policy(
                        step,
                        AttemptResult::Attempt {
                            attempt,
                            outcome: Err(kind),
                        },
                    );
                    if decision == FaultDecision::Retry {
                        self.config.clock.sleep(self.config.retry_backoff);
                        attempt += 1;
                        continue;
                    }
                    return self.finish_failed(r, kind, outcome.result.describe());
                }
            }
        }
    }

    fn finish_failed(&self, mut r: StepRecord, kind: FailureKind, message: String) -> Settled {
        r.phase = Phase::Failed;
        r.ended_at = Some(self.now());
        r.failure = Some(Failure { kind, message });
        self.persist(&r);
        Settled::failed()
    }

    /// Splits one sliced input into its elements.
    fn slice_source(&self, name: &str, raw: &IoValues) -> Result<SliceSource, String> {
        if let Some(p) = raw.parameters.get(name) {
            return split_list(name, &p.text)
                .map(SliceSource::Parameters)
                .map_err(|e| e.to_string());
        }
        let Some(a) = raw.artifacts.get(name) else {
            return Err(format!("sliced input `{name}` is not bound"));
        };
        if a.is_local_path() {
            let mut entries: Vec<String> = fs::read_dir(&a.location)
                .map_err(|e| format!("sliced input `{name}`: {e}"))?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            if entries.iter().all(|n| n.parse::<u64>().is_ok()) {
                entries.sort_by_key(|n| n.parse::<u64>().unwrap_or(u64::MAX));
            } else {
                entries.sort();
            }
            Ok(SliceSource::Artifacts(
                entries.into_iter().map(|n| format!("{}/{n}", a.location)).collect(),
            ))
        } else {
            let children = self
                .engine
                .storage
                .children(&a.location)
                .map_err(|e| format!("sliced input `{name}`: {e}"))?;
            Ok(SliceSource::Artifacts(
                children.into_iter().map(|n| format!("{}/{n}", a.location)).collect(),
            ))
        }
    }

    fn run_slice_group(
        &self,
        frame: &Frame<'_>,
        step: &StepDef,
        template: &OpTemplate,
        base: &Base,
        raw: IoValues,
    ) -> Settled {
        let Some(slices) = &step.slices else {
            return Settled::failed();
        };
        let group_sig = stacked_signature(template.outputs(), &slices.stacked_outputs);
        if let Some(s) = self.try_reuse(base, &raw, &group_sig) {
            return s;
        }
        let mut group = base.record(Phase::Running, 1, &raw);
        group.started_at = Some(self.now());
        self.persist(&group);
        let fail = |mut group: StepRecord, message: String| {
            group.phase = Phase::Failed;
            group.ended_at = Some(self.now());
            group.failure = Some(Failure::fatal(message));
            self.persist(&group);
            Settled::failed()
        };

        let mut sources = BTreeMap::new();
        for name in &slices.sliced_inputs {
            match self.slice_source(name, &raw) {
                Ok(s) => {
                    sources.insert(name.clone(), s);
                }
                Err(e) => return fail(group, e),
            }
        }
        let mut unsliced = raw.clone();
        for name in &slices.sliced_inputs {
            unsliced.parameters.remove(name);
            unsliced.artifacts.remove(name);
        }
        let instances = match expand_slices(&base.key, &sources, &unsliced) {
            Ok(v) => v,
            Err(e) => return fail(group, format!("SliceLengthMismatch: {e}")),
        };

        let run_instance = |i: usize| -> Settled {
            let inst = &instances[i];
            let inst_base = Base {
                key: inst.key.clone(),
                keyed: base.keyed,
                name: step.name.clone(),
                template: step.template.clone(),
                kind: template.kind(),
                path: format!("{}[{i}]", base.path),
                parent: Some(base.key.clone()),
                slice_index: Some(i as u32),
            };
            if let Err(e) = self.claim_key(&inst.key) {
                let mut b = inst_base;
                b.key = self.generated_key(&step.name);
                return self.fail_early(&b, &inst.inputs, e);
            }
            let mut inputs = inst.inputs.clone();
            let empty = BTreeMap::new();
            match self.bind_step_inputs(frame, step, template.inputs(), &empty, Some(&inst.item)) {
                Ok(extra) => {
                    for (name, vref) in &step.input_bindings {
                        if !vref.uses_item() {
                            continue;
                        }
                        if let Some(p) = extra.parameters.get(name) {
                            inputs.parameters.insert(name.clone(), p.clone());
                        }
                        if let Some(a) = extra.artifacts.get(name) {
                            inputs.artifacts.insert(name.clone(), a.clone());
                        }
                    }
                }
                Err(e) => return self.fail_early(&inst_base, &inputs, e),
            }
            self.instantiate(frame.stack, template, &inst_base, inputs, Some(step))
        };

        let n = instances.len();
        let mut results: Vec<Option<Settled>> = (0..n).map(|_| None).collect();
        let limit = slices
            .parallelism
            .map(|p| p as usize)
            .unwrap_or(usize::MAX)
            .min(self.config.parallelism)
            .max(1);
        if self.config.sequential || limit == 1 {
            for (i, slot) in results.iter_mut().enumerate() {
                *slot = Some(run_instance(i));
            }
        } else {
            std::thread::scope(|s| {
                let (tx, rx) = mpsc::channel::<(usize, Settled)>();
                let mut next = 0usize;
                let mut in_flight = 0usize;
                loop {
                    while in_flight < limit && next < n {
                        let i = next;
                        next += 1;
                        let tx = tx.clone();
                        let run_instance = &run_instance;
                        std::thread::Builder::new()
                            .stack_size(WORKER_STACK)
                            .spawn_scoped(s, move || {
                                let _ = tx.send((i, run_instance(i)));
                            })
                            .expect("spawning a slice thread");
                        in_flight += 1;
                    }
                    if in_flight == 0 {
                        break;
                    }
                    let (i, settled) = rx.recv().expect("slice threads hold a sender");
                    in_flight -= 1;
                    results[i] = Some(settled);
                }
            });
        }

        let outputs: Vec<Option<IoValues>> = results
            .into_iter()
            .map(|r| r.and_then(|s| s.phase.has_outputs().then_some(s.outputs).flatten()))
            .collect();
        let succeeded = outputs.iter().filter(|o| o.is_some()).count() as u64;
        let decision = apply_fault_policy(
            step,
            AttemptResult::Group {
                total: n as u64,
                succeeded,
            },
        );
        if decision != FaultDecision::SucceedGroup {
            return fail(
                group,
                format!("{succeeded} of {n} slice instances succeeded; not enough to continue"),
            );
        }
        let stacked = aggregate_slice_outputs(&outputs, &slices.stacked_outputs, template.outputs());
        let mut group_outputs = IoValues {
            parameters: stacked.parameters,
            artifacts: BTreeMap::new(),
        };
        for (name, locations) in stacked.artifacts {
            let key = self.artifact_key(&base.key, &name);
            for (i, loc) in locations.iter().enumerate() {
                let Some(loc) = loc else { continue };
                let dst = format!("{key}/{i}");
                let res = if loc.starts_with('/') {
                    self.engine.storage.upload(Path::new(loc), &dst)
                } else {
                    self.engine.storage.copy(loc, &dst)
                };
                if let Err(e) = res {
                    return fail(group, format!("stacking artifact `{name}`: {e}"));
                }
            }
            group_outputs.artifacts.insert(name, ArtifactValue::at(key));
        }
        match typecheck_io(&group_sig, &group_outputs) {
            Ok(outputs) => {
                group.phase = Phase::Succeeded;
                group.ended_at = Some(self.now());
                group.outputs = Some(outputs.clone());
                self.persist(&group);
                Settled {
                    phase: Phase::Succeeded,
                    outputs: Some(outputs),
                }
            }
            Err(e) => fail(group, format!("stacked outputs: {e}")),
        }
    }
}
