//! The `opflow` command line.
//!
//! Exit codes: 0 success, 1 workflow failed, 2 validation error,
//! 3 not found, 4 invalid state.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use opflow_core::record::{Phase, StepRecord};
use opflow_core::validate::validate_workflow;
use opflow_core::workflow::WorkflowSpec;

use crate::batch::{SimBatch, SimDaemon};
use crate::executor::{BatchType, DispatcherExecutor, MachineSpec, ResourceSpec, StepFiles};
use crate::scheduler::{Engine, RunConfig, RunError};
use crate::spec_io::{load_spec, parse_spec};
use crate::state::StateError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NOT_FOUND: i32 = 3;
pub const EXIT_BAD_STATE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "opflow", version, about = "Run typed script workflows locally")]
pub struct Cli {
    /// Data directory.
    #[arg(long, env = "OPFLOW_HOME", global = true)]
    pub home: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Validate, store and run a workflow; prints its id.
    Submit(SubmitArgs),
    /// Check a workflow document without running it.
    Validate {
        spec: PathBuf,
        #[arg(long = "param", value_name = "NAME=VALUE")]
        params: Vec<String>,
    },
    /// Print a workflow's phase.
    Status {
        wf_id: String,
        #[arg(long)]
        json: bool,
    },
    /// List step records, or show one with --key.
    Steps {
        wf_id: String,
        #[arg(long)]
        key: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Print a step's combined stdout/stderr log.
    Logs {
        wf_id: String,
        key: String,
        /// Keep printing until the step settles.
        #[arg(long, short)]
        follow: bool,
    },
    /// Re-render the step table until the workflow settles.
    Watch {
        wf_id: String,
        #[arg(long, default_value_t = 500)]
        interval_ms: u64,
        #[arg(long)]
        json: bool,
    },
    /// Resubmit a settled workflow, reusing its keyed successes.
    Retry {
        wf_id: String,
        #[command(flatten)]
        run: RunArgs,
    },
    #[command(hide = true)]
    RunPrepared {
        wf_id: String,
        #[arg(long)]
        parallelism: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct SubmitArgs {
    pub spec: PathBuf,
    /// Override a global input.
    #[arg(long = "param", value_name = "NAME=VALUE")]
    pub params: Vec<String>,
    /// Reuse keyed results of an earlier workflow (repeatable).
    #[arg(long = "reuse-from", value_name = "WF_ID")]
    pub reuse_from: Vec<String>,
    /// Only reuse these keys (repeatable); default is every keyed success.
    #[arg(long = "reuse-key", value_name = "KEY")]
    pub reuse_keys: Vec<String>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Return after printing the id; the run continues in the background.
    #[arg(long)]
    pub detach: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default)]
    pub default_parallelism: Option<usize>,
    #[serde(default)]
    pub default_executor: Option<String>,
    #[serde(default)]
    pub executors: BTreeMap<String, ExecutorConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutorConfig {
    pub batch_type: BatchType,
    pub work_root: PathBuf,
    /// Simulator worker threads started by each engine process.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub resources: Option<ResourceSpec>,
    #[serde(default)]
    pub poll_interval_ms: Option<u64>,
}

fn default_workers() -> usize {
    4
}

struct Fail(i32, String);

impl From<StateError> for Fail {
    fn from(e: StateError) -> Self {
        let code = match e {
            StateError::UnknownWorkflow(_) => EXIT_NOT_FOUND,
            StateError::Locked(_) => EXIT_BAD_STATE,
            _ => EXIT_FAILED,
        };
        Fail(code, e.to_string())
    }
}

impl From<io::Error> for Fail {
    fn from(e: io::Error) -> Self {
        Fail(EXIT_FAILED, e.to_string())
    }
}

impl From<RunError> for Fail {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Invalid(_) | RunError::Reuse(_) => Fail(EXIT_INVALID, e.to_string()),
            RunError::State(s) => s.into(),
            RunError::NotPending(..) => Fail(EXIT_BAD_STATE, e.to_string()),
            e => Fail(EXIT_FAILED, e.to_string()),
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(Fail(code, msg)) => {
            eprintln!("opflow: {msg}");
            code
        }
    }
}

fn home_dir(cli: &Cli) -> PathBuf {
    cli.home.clone().unwrap_or_else(|| {
        let base = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| ".".into());
        base.join(".opflow")
    })
}

fn load_config(home: &Path) -> Result<CliConfig, Fail> {
    let path = home.join("config.yaml");
    match fs::read_to_string(&path) {
        Ok(text) => {
            let value: serde_json::Value = serde_yaml::from_str(&text)
                .map_err(|e| Fail(EXIT_INVALID, format!("{}: {e}", path.display())))?;
            if value.is_null() {
                return Ok(CliConfig::default());
            }
            serde_json::from_value(value).map_err(|e| Fail(EXIT_INVALID, format!("{}: {e}", path.display())))
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(CliConfig::default()),
        Err(e) => Err(e.into()),
    }
}

struct Context {
    home: PathBuf,
    config: CliConfig,
    engine: Engine,
}

impl Context {
    fn open(home: PathBuf) -> Result<Self, Fail> {
        fs::create_dir_all(&home)?;
        let config = load_config(&home)?;
        let mut engine = Engine::open(&home)?;
        for (name, ex) in &config.executors {
            let mut d = DispatcherExecutor::new(
                name.clone(),
                MachineSpec {
                    batch_type: ex.batch_type,
                    work_root: ex.work_root.clone(),
                },
                ex.resources.clone().unwrap_or_default(),
            );
            if let Some(ms) = ex.poll_interval_ms {
                d.poll_interval = Duration::from_millis(ms);
            }
            engine = engine.with_executor(Arc::new(d));
        }
        Ok(Context { home, config, engine })
    }

    fn run_config(&self, parallelism: Option<usize>) -> RunConfig {
        let mut c = RunConfig::default();
        if let Some(p) = parallelism.or(self.config.default_parallelism) {
            c.parallelism = p.max(1);
        }
        if let Some(e) = &self.config.default_executor {
            c.default_executor = e.clone();
        }
        c
    }

    /// Simulator workers for every sim executor; they stop when dropped.
    fn start_simulators(&self) -> Result<Vec<SimDaemon>, Fail> {
        let mut daemons = Vec::new();
        for ex in self.config.executors.values() {
            if ex.batch_type == BatchType::Sim {
                let sim = SimBatch::new(&ex.work_root, ex.workers)?;
                daemons.push(sim.start());
            }
        }
        Ok(daemons)
    }

    /// Runs a prepared workflow here or in a detached child.
    fn launch(&self, wf_id: &str, run: &RunArgs) -> Result<i32, Fail> {
        println!("{wf_id}");
        let _ = io::stdout().flush();
        if run.detach {
            self.spawn_detached(wf_id, run.parallelism)?;
            return Ok(EXIT_OK);
        }
        let _sims = self.start_simulators()?;
        let result = self.engine.run_prepared(wf_id, &self.run_config(run.parallelism))?;
        if let Some(e) = &result.error {
            eprintln!("opflow: {e}");
        }
        for r in &result.records {
            if r.phase == Phase::Failed {
                if let Some(f) = &r.failure {
                    eprintln!("step {} ({}) failed: {}", r.key, r.path, f.message);
                }
            }
        }
        Ok(phase_code(result.phase))
    }

    fn spawn_detached(&self, wf_id: &str, parallelism: Option<usize>) -> Result<(), Fail> {
        let exe = std::env::current_exe()?;
        let log = File::create(self.engine.state().workflow_dir(wf_id).join("engine.log"))?;
        let mut cmd = Command::new(exe);
        cmd.arg("--home").arg(&self.home).arg("run-prepared").arg(wf_id);
        if let Some(p) = parallelism {
            cmd.arg("--parallelism").arg(p.to_string());
        }
        cmd.stdin(Stdio::null())
            .stdout(log.try_clone()?)
            .stderr(log)
            .process_group(0);
        cmd.spawn()?;
        Ok(())
    }
}

fn phase_code(phase: Phase) -> i32 {
    if phase == Phase::Succeeded {
        EXIT_OK
    } else {
        EXIT_FAILED
    }
}

fn apply_params(spec: &mut WorkflowSpec, params: &[String]) -> Result<(), Fail> {
    for p in params {
        let (name, value) = p
            .split_once('=')
            .ok_or_else(|| Fail(EXIT_INVALID, format!("--param `{p}` is not NAME=VALUE")))?;
        spec.set_parameter(name, value)
            .map_err(|e| Fail(EXIT_INVALID, format!("--param {name}: {e}")))?;
    }
    Ok(())
}

fn read_spec(path: &Path, params: &[String]) -> Result<WorkflowSpec, Fail> {
    let mut spec = load_spec(path).map_err(|e| Fail(EXIT_INVALID, e.to_string()))?;
    apply_params(&mut spec, params)?;
    Ok(spec)
}

/// Prints diagnostics to stderr; fails with exit 2 if any is an error.
fn check(spec: &WorkflowSpec) -> Result<(), Fail> {
    let report = validate_workflow(spec);
    for d in &report.diagnostics {
        eprintln!("{d}");
    }
    if report.is_accepted() {
        Ok(())
    } else {
        Err(Fail(EXIT_INVALID, format!("{} error(s); nothing was run", report.errors().count())))
    }
}

fn dispatch(cli: Cli) -> Result<i32, Fail> {
    let home = home_dir(&cli);
    match cli.command {
        Cmd::Validate { spec, params } => {
            let spec = read_spec(&spec, &params)?;
            check(&spec)?;
            println!("ok");
            Ok(EXIT_OK)
        }
        Cmd::Submit(args) => {
            let spec = read_spec(&args.spec, &args.params)?;
            check(&spec)?;
            let ctx = Context::open(home)?;
            let mut reuse: Vec<StepRecord> = Vec::new();
            for wf in &args.reuse_from {
                reuse.extend(ctx.engine.state().harvest_reuse(wf)?);
            }
            if !args.reuse_keys.is_empty() {
                for k in &args.reuse_keys {
                    if !reuse.iter().any(|r| &r.key == k) {
                        return Err(Fail(EXIT_NOT_FOUND, format!("no reusable record with key `{k}`")));
                    }
                }
                reuse.retain(|r| args.reuse_keys.contains(&r.key));
            }
            let wf_id = ctx.engine.prepare(&spec, &reuse)?;
            ctx.launch(&wf_id, &args.run)
        }
        Cmd::Retry { wf_id, run } => {
            let ctx = Context::open(home)?;
            let state = ctx.engine.state();
            let phase = state.status(&wf_id)?;
            if !phase.is_terminal() {
                if state.is_locked(&wf_id)? {
                    return Err(Fail(EXIT_BAD_STATE, format!("workflow `{wf_id}` is still running")));
                }
                // Nobody holds the lock: the engine died. Settle it first.
                let _lock = state.lock(&wf_id)?;
                state.set_status(&wf_id, Phase::Failed)?;
                eprintln!("opflow: `{wf_id}` was abandoned while {phase}; marked Failed");
            }
            let spec = parse_spec(&state.spec_text(&wf_id)?).map_err(|e| Fail(EXIT_FAILED, e.to_string()))?;
            let reuse = state.harvest_reuse(&wf_id)?;
            let new_id = ctx.engine.prepare(&spec, &reuse)?;
            ctx.launch(&new_id, &run)
        }
        Cmd::RunPrepared { wf_id, parallelism } => {
            let ctx = Context::open(home)?;
            let _sims = ctx.start_simulators()?;
            let result = ctx.engine.run_prepared(&wf_id, &ctx.run_config(parallelism))?;
            if let Some(e) = &result.error {
                eprintln!("opflow: {e}");
            }
            Ok(phase_code(result.phase))
        }
        Cmd::Status { wf_id, json } => {
            let ctx = Context::open(home)?;
            let state = ctx.engine.state();
            let phase = state.status(&wf_id)?;
            if json {
                let doc = serde_json::json!({
                    "workflow_id": wf_id,
                    "phase": phase,
                    "outputs": state.workflow_outputs(&wf_id)?,
                });
                println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
            } else {
                println!("{phase}");
            }
            Ok(EXIT_OK)
        }
        Cmd::Steps { wf_id, key, json } => {
            let ctx = Context::open(home)?;
            let state = ctx.engine.state();
            state.status(&wf_id)?;
            match key {
                Some(k) => {
                    let rec = state
                        .query_step(&wf_id, &k)?
                        .ok_or_else(|| Fail(EXIT_NOT_FOUND, format!("no step `{k}` in `{wf_id}`")))?;
                    println!("{}", serde_json::to_string_pretty(&rec).expect("json"));
                }
                None => {
                    let steps = sorted_steps(state.list_steps(&wf_id)?);
                    if json {
                        println!("{}", serde_json::to_string_pretty(&steps).expect("json"));
                    } else {
                        print!("{}", render_table(&steps));
                    }
                }
            }
            Ok(EXIT_OK)
        }
        Cmd::Logs { wf_id, key, follow } => {
            let ctx = Context::open(home)?;
            let state = ctx.engine.state();
            state.status(&wf_id)?;
            if state.query_step(&wf_id, &key)?.is_none() {
                return Err(Fail(EXIT_NOT_FOUND, format!("no step `{key}` in `{wf_id}`")));
            }
            let files = StepFiles::in_dir(&state.step_dir(&wf_id, &key));
            let mut offset = 0u64;
            loop {
                let settled = !follow
                    || state.query_step(&wf_id, &key)?.is_none_or(|r| r.phase.is_terminal());
                offset = copy_from(&files.log, offset)?;
                if settled {
                    return Ok(EXIT_OK);
                }
                std::thread::sleep(Duration::from_millis(200));
            }
        }
        Cmd::Watch { wf_id, interval_ms, json } => {
            let ctx = Context::open(home)?;
            let state = ctx.engine.state();
            let mut last = String::new();
            let mut unlocked_polls = 0u32;
            loop {
                let phase = state.status(&wf_id)?;
                let steps = sorted_steps(state.list_steps(&wf_id)?);
                let view = if json {
                    serde_json::to_string_pretty(&steps).expect("json") + "\n"
                } else {
                    format!("{wf_id}: {phase}\n{}", render_table(&steps))
                };
                if view != last {
                    print!("{view}");
                    let _ = io::stdout().flush();
                    last = view;
                }
                if phase.is_terminal() {
                    return Ok(phase_code(phase));
                }
                if phase == Phase::Running && !state.is_locked(&wf_id)? {
                    // Running with no lock holder: give the writer a moment
                    // to finish its final status write.
                    unlocked_polls += 1;
                    if unlocked_polls > 3 {
                        return Err(Fail(EXIT_BAD_STATE, format!("workflow `{wf_id}` was abandoned")));
                    }
                } else {
                    unlocked_polls = 0;
                }
                std::thread::sleep(Duration::from_millis(interval_ms.max(10)));
            }
        }
    }
}

fn copy_from(path: &Path, offset: u64) -> Result<u64, Fail> {
    let mut f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(offset),
        Err(e) => return Err(e.into()),
    };
    f.seek(SeekFrom::Start(offset))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    io::stdout().write_all(&buf)?;
    io::stdout().flush()?;
    Ok(offset + buf.len() as u64)
}

fn sorted_steps(mut steps: Vec<StepRecord>) -> Vec<StepRecord> {
    steps.sort_by(|a, b| (a.started_at, &a.path, &a.key).cmp(&(b.started_at, &b.path, &b.key)));
    steps
}

fn fmt_duration(r: &StepRecord) -> String {
    match r.duration_ms() {
        Some(ms) => format!("{}.{:03}s", ms / 1000, ms % 1000),
        None => "-".into(),
    }
}

/// Key, name, phase, attempt and duration, one row per record.
pub fn render_table(steps: &[StepRecord]) -> String {
    let header = ["KEY", "NAME", "PHASE", "ATTEMPT", "DURATION"];
    let rows: Vec<[String; 5]> = steps
        .iter()
        .map(|r| {
            [
                r.key.clone(),
                r.name.clone(),
                r.phase.to_string(),
                r.attempt.to_string(),
                fmt_duration(r),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: [&str; 5]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(header);
    for row in &rows {
        line([&row[0], &row[1], &row[2], &row[3], &row[4]]);
    }
    out
}
