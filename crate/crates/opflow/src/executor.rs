//! Executors: the render contract, the local process runner and the batch dispatcher.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use opflow_core::expr::{render_placeholders, ExprError, Scope};
use opflow_core::policy::FailureKind;
use opflow_core::template::ScriptTemplate;
use opflow_core::value::{IoValues, ParameterValue, ValueError};
use serde::{Deserialize, Serialize};

use crate::state::read_parameter_file;

/// Exit code a script uses to report a transient failure.
pub const TRANSIENT_EXIT_CODE: i32 = 64;

/// Marker a dispatcher leaves in the workdir when the batch job hit its walltime.
pub const TIMEOUT_MARKER: &str = ".opflow-timeout";

/// A plugin that rewrites a script template to run on some backend.
///
/// `render` must be pure and must leave the input/output signatures and
/// output sources untouched.
pub trait Executor: Send + Sync {
    fn name(&self) -> &str;
    fn render(&self, template: &ScriptTemplate) -> ScriptTemplate;
}

/// Runs scripts as they are.
#[derive(Debug, Default, Clone)]
pub struct LocalExecutor;

impl Executor for LocalExecutor {
    fn name(&self) -> &str {
        "local"
    }

    fn render(&self, template: &ScriptTemplate) -> ScriptTemplate {
        template.clone()
    }
}

/// Files of one Pod step.
#[derive(Debug, Clone)]
pub struct StepFiles {
    pub workdir: PathBuf,
    pub script: PathBuf,
    pub log: PathBuf,
}

impl StepFiles {
    pub fn in_dir(dir: &Path) -> Self {
        StepFiles {
            workdir: dir.join("workdir"),
            script: dir.join("script"),
            log: dir.join("log"),
        }
    }
}

/// One process launch: `command... <script>` inside `workdir`.
#[derive(Debug, Clone)]
pub struct ExecRequest {
    pub command: Vec<String>,
    pub script: PathBuf,
    pub workdir: PathBuf,
    /// stdout and stderr are both appended here.
    pub log: PathBuf,
    pub timeout: Option<Duration>,
    /// Identity of the attempt, for instrumentation.
    pub step_path: String,
    pub key: String,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecResult {
    /// `None` when the process died from a signal.
    pub exit_code: Option<i32>,
    pub timed_out: bool,
    pub stdout_path: PathBuf,
    pub stderr_path: PathBuf,
    pub duration: Duration,
}

impl ExecResult {
    /// Exit-code convention: 0 success, 64 transient, anything else fatal.
    pub fn classify(&self, workdir: &Path) -> Result<(), FailureKind> {
        if self.timed_out || workdir.join(TIMEOUT_MARKER).exists() {
            return Err(FailureKind::Timeout);
        }
        match self.exit_code {
            Some(0) => Ok(()),
            Some(TRANSIENT_EXIT_CODE) => Err(FailureKind::Transient),
            _ => Err(FailureKind::Fatal),
        }
    }

    pub fn describe(&self) -> String {
        if self.timed_out {
            return format!("timed out after {:.1}s", self.duration.as_secs_f64());
        }
        match self.exit_code {
            Some(TRANSIENT_EXIT_CODE) => "exit code 64 (transient)".to_string(),
            Some(c) => format!("exit code {c}"),
            None => "killed by signal".to_string(),
        }
    }
}

/// Launches script processes. Swappable so tests can count or fake launches.
pub trait ScriptRunner: Send + Sync {
    fn run(&self, req: &ExecRequest) -> io::Result<ExecResult>;
}

/// Runs each script in its own process group so a timeout can kill the whole tree.
#[derive(Debug, Default, Clone)]
pub struct ProcessRunner;

/// SIGKILL to every process in the group led by `pid`.
pub fn kill_process_group(pid: u32) {
    // SAFETY: kill(2) has no memory-safety preconditions.
    unsafe {
        libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
    }
}

impl ScriptRunner for ProcessRunner {
    fn run(&self, req: &ExecRequest) -> io::Result<ExecResult> {
        let (program, args) = req
            .command
            .split_first()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty command"))?;
        let log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&req.log)?;
        let mut child = Command::new(program)
            .args(args)
            .arg(&req.script)
            .current_dir(&req.workdir)
            .stdin(Stdio::null())
            .stdout(log.try_clone()?)
            .stderr(log)
            .process_group(0)
            .spawn()?;
        let start = Instant::now();
        let mut nap = Duration::from_millis(1);
        let (status, timed_out) = loop {
            if let Some(status) = child.try_wait()? {
                break (Some(status), false);
            }
            if req.timeout.is_some_and(|t| start.elapsed() >= t) {
                kill_process_group(child.id());
                let _ = child.wait();
                break (None, true);
            }
            std::thread::sleep(nap);
            nap = (nap * 2).min(Duration::from_millis(20));
        };
        Ok(ExecResult {
            exit_code: status.and_then(|s| s.code()),
            timed_out,
            stdout_path: req.log.clone(),
            stderr_path: req.log.clone(),
            duration: start.elapsed(),
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("rendering script: {0}")]
    Render(#[from] ExprError),
    #[error("output `{name}`: missing file {}", path.display())]
    MissingOutputFile { name: String, path: PathBuf },
    #[error("output `{name}`: {source}")]
    OutputType { name: String, source: ValueError },
    #[error("executor I/O: {0}")]
    Io(#[from] io::Error),
}

/// Outputs read back from a finished workdir.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Collected {
    pub parameters: BTreeMap<String, ParameterValue>,
    /// Local paths still to be uploaded.
    pub artifacts: BTreeMap<String, PathBuf>,
}

/// Reads output parameters (one trailing newline stripped) and locates
/// output artifacts. Missing optional outputs are left out.
pub fn collect_outputs(template: &ScriptTemplate, workdir: &Path) -> Result<Collected, ExecError> {
    let mut out = Collected::default();
    for (name, decl) in &template.outputs.parameters {
        let Some(rel) = template.output_parameter_sources.get(name) else {
            continue;
        };
        let path = workdir.join(rel);
        match read_parameter_file(&path) {
            Ok(text) => {
                let value = ParameterValue::parse(decl.type_tag, &text).map_err(|source| {
                    ExecError::OutputType {
                        name: name.clone(),
                        source,
                    }
                })?;
                out.parameters.insert(name.clone(), value);
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                if !decl.optional && decl.default.is_none() {
                    return Err(ExecError::MissingOutputFile {
                        name: name.clone(),
                        path,
                    });
                }
            }
            Err(e) => return Err(e.into()),
        }
    }
    for (name, decl) in &template.outputs.artifacts {
        let Some(rel) = template.output_artifact_sources.get(name) else {
            continue;
        };
        let path = workdir.join(rel);
        if path.exists() {
            out.artifacts.insert(name.clone(), path);
        } else if !decl.optional {
            return Err(ExecError::MissingOutputFile {
                name: name.clone(),
                path,
            });
        }
    }
    Ok(out)
}

/// Placeholder scope a script sees.
pub fn script_scope(inputs: &IoValues, workflow_name: &str, workflow_id: &str) -> Scope {
    let mut scope = Scope::new()
        .with("workflow.name", workflow_name)
        .with("workflow.id", workflow_id);
    for (name, p) in &inputs.parameters {
        scope.insert(format!("inputs.parameters.{name}"), p.text.clone());
    }
    scope
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub result: ExecResult,
    pub status: Result<(), FailureKind>,
    /// Present when the run succeeded.
    pub outputs: Option<Collected>,
}

/// Renders the script, runs it once through `runner`, and collects outputs
/// on success. Input artifacts must already be in place.
pub fn execute_with(
    runner: &dyn ScriptRunner,
    template: &ScriptTemplate,
    files: &StepFiles,
    scope: &Scope,
    timeout: Option<Duration>,
    identity: (&str, &str, u32),
) -> Result<LocalOutcome, ExecError> {
    let script = render_placeholders(&template.script, scope)?;
    fs::create_dir_all(&files.workdir)?;
    fs::write(&files.script, script)?;
    let req = ExecRequest {
        command: template.command.clone(),
        script: files.script.clone(),
        workdir: files.workdir.clone(),
        log: files.log.clone(),
        timeout,
        step_path: identity.0.to_string(),
        key: identity.1.to_string(),
        attempt: identity.2,
    };
    let result = runner.run(&req)?;
    let status = result.classify(&files.workdir);
    let outputs = match status {
        Ok(()) => Some(collect_outputs(template, &files.workdir)?),
        Err(_) => None,
    };
    Ok(LocalOutcome {
        result,
        status,
        outputs,
    })
}

/// Runs `template` locally in `files.workdir` with parameter placeholders
/// bound from `inputs`.
pub fn local_execute(
    template: &ScriptTemplate,
    files: &StepFiles,
    inputs: &IoValues,
    timeout: Option<Duration>,
) -> Result<LocalOutcome, ExecError> {
    let scope = script_scope(inputs, "", "");
    execute_with(&ProcessRunner, template, files, &scope, timeout, ("", "", 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchType {
    #[serde(rename = "sim")]
    Sim,
    #[serde(rename = "slurm-dialect", alias = "slurm")]
    Slurm,
    #[serde(rename = "pbs-dialect", alias = "pbs")]
    Pbs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineSpec {
    pub batch_type: BatchType,
    pub work_root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceSpec {
    pub cpu: u32,
    pub memory_mb: u64,
    pub queue: String,
    pub walltime_seconds: u64,
}

impl Default for ResourceSpec {
    fn default() -> Self {
        ResourceSpec {
            cpu: 1,
            memory_mb: 1024,
            queue: "normal".into(),
            walltime_seconds: 3600,
        }
    }
}

fn hms(seconds: u64) -> String {
    format!("{:02}:{:02}:{:02}", seconds / 3600, seconds / 60 % 60, seconds % 60)
}

/// Resource directives for a job script.
pub fn job_header(batch_type: BatchType, r: &ResourceSpec) -> String {
    match batch_type {
        BatchType::Sim => format!(
            "#OPFLOW queue={}\n#OPFLOW cpu={}\n#OPFLOW memory_mb={}\n#OPFLOW walltime={}\n",
            r.queue, r.cpu, r.memory_mb, r.walltime_seconds
        ),
        BatchType::Slurm => format!(
            "#SBATCH --partition={}\n#SBATCH --ntasks=1\n#SBATCH --cpus-per-task={}\n#SBATCH --mem={}M\n#SBATCH --time={}\n",
            r.queue,
            r.cpu,
            r.memory_mb,
            hms(r.walltime_seconds)
        ),
        BatchType::Pbs => format!(
            "#PBS -q {}\n#PBS -l nodes=1:ppn={}\n#PBS -l mem={}mb\n#PBS -l walltime={}\n",
            r.queue,
            r.cpu,
            r.memory_mb,
            hms(r.walltime_seconds)
        ),
    }
}

/// Name the original script is saved under when a dialect job wraps it.
pub const JOB_BODY_FILE: &str = ".opflow-job.body";

/// Complete job script. The sim dialect is header + original body; the
/// simulator runs it with the step's own command. Real dialects get a
/// shebang and exec the step command on the saved body.
pub fn job_script(batch_type: BatchType, r: &ResourceSpec, command: &[String], body: &str) -> String {
    let header = job_header(batch_type, r);
    match batch_type {
        BatchType::Sim => format!("{header}{body}"),
        BatchType::Slurm | BatchType::Pbs => {
            let argv: Vec<String> = command.iter().map(|a| shell_quote(a)).collect();
            format!("#!/bin/sh\n{header}exec {} {JOB_BODY_FILE}\n", argv.join(" "))
        }
    }
}

/// Single-quotes `s` for POSIX sh.
pub fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// A heredoc delimiter that no line of `body` equals.
fn heredoc_delimiter(body: &str) -> String {
    let mut delim = "OPFLOW_JOB_EOF".to_string();
    let mut n = 0;
    while body.lines().any(|l| l == delim) {
        n += 1;
        delim = format!("OPFLOW_JOB_EOF_{n}");
    }
    delim
}

/// Submits each step as a batch job and polls until it finishes.
#[derive(Debug, Clone)]
pub struct DispatcherExecutor {
    name: String,
    pub machine: MachineSpec,
    pub resources: ResourceSpec,
    pub poll_interval: Duration,
}

impl DispatcherExecutor {
    pub fn new(name: impl Into<String>, machine: MachineSpec, resources: ResourceSpec) -> Self {
        DispatcherExecutor {
            name: name.into(),
            machine,
            resources,
            poll_interval: Duration::from_millis(500),
        }
    }

    fn sim_wrapper(&self, t: &ScriptTemplate) -> String {
        let body = job_script(BatchType::Sim, &self.resources, &t.command, &t.script);
        let delim = heredoc_delimiter(&body);
        let command_json = serde_json::to_string(&t.command).unwrap_or_else(|_| "[]".into());
        let interval = self.poll_interval.as_secs_f64();
        let interval_ms = self.poll_interval.as_millis();
        let limit_ms = (self.resources.walltime_seconds + 2) * 1000;
        format!(
            r#"# submitted through the opflow sim dispatcher
work_root={root}
if [ ! -d "$work_root" ]; then
  echo "opflow: batch work root $work_root is not reachable" >&2
  exit 64
fi
job_id="$(date +%s%N)-$$"
job_dir="$work_root/jobs/$job_id"
mkdir -p "$job_dir" "$work_root/queue" || exit 64
cat > "$job_dir/script" <<'{delim}'
{body}
{delim}
printf '%s\n' {command} > "$job_dir/command" || exit 64
pwd > "$job_dir/workdir" || exit 64
date +%s%3N > "$job_dir/submit_time"
printf Queued > "$job_dir/.state.tmp" && mv "$job_dir/.state.tmp" "$job_dir/state" || exit 64
: > "$work_root/queue/$(date +%s%N)-$job_id" || exit 64
echo "opflow: submitted job $job_id"
running_ms=0
while :; do
  state=$(cat "$job_dir/state" 2>/dev/null)
  case "$state" in
    Completed|Failed|TimedOut) break ;;
    Running)
      running_ms=$((running_ms + {interval_ms}))
      if [ "$running_ms" -gt {limit_ms} ]; then
        echo "opflow: job $job_id still running past walltime + grace" >&2
        exit 1
      fi ;;
  esac
  sleep {interval}
done
cat "$job_dir/stdout" 2>/dev/null
cat "$job_dir/stderr" >&2 2>/dev/null
echo "opflow: job $job_id finished: $state"
case "$state" in
  Completed) exit 0 ;;
  TimedOut) : > {marker}; exit 1 ;;
  *) exit 1 ;;
esac
"#,
            root = shell_quote(&self.machine.work_root.to_string_lossy()),
            body = body.strip_suffix('\n').unwrap_or(&body),
            command = shell_quote(&command_json),
            marker = TIMEOUT_MARKER,
        )
    }

    fn dialect_wrapper(&self, t: &ScriptTemplate) -> String {
        let job = job_script(self.machine.batch_type, &self.resources, &t.command, "");
        let body_delim = heredoc_delimiter(&t.script);
        let job_delim = heredoc_delimiter(&job);
        let interval = self.poll_interval.as_secs_f64();
        let (submit, poll, done) = match self.machine.batch_type {
            BatchType::Slurm => (
                "job_id=$(sbatch --parsable .opflow-job.sh) || exit 64",
                r#"squeue -h -j "$job_id" -o %T 2>/dev/null | grep -q ."#,
                r#"state=$(sacct -n -X -P -j "$job_id" -o State | head -n1)
case "$state" in
  COMPLETED*) exit 0 ;;
  TIMEOUT*) : > .opflow-timeout; exit 1 ;;
  *) exit 1 ;;
esac"#,
            ),
            _ => (
                "job_id=$(qsub .opflow-job.sh) || exit 64",
                r#"qstat "$job_id" >/dev/null 2>&1"#,
                r#"status=$(qstat -x -f "$job_id" | sed -n 's/.*Exit_status = //p')
case "$status" in
  0) exit 0 ;;
  -29|-11) : > .opflow-timeout; exit 1 ;;
  *) exit 1 ;;
esac"#,
            ),
        };
        format!(
            "cat > {JOB_BODY_FILE} <<'{body_delim}'\n{}\n{body_delim}\ncat > .opflow-job.sh <<'{job_delim}'\n{}\n{job_delim}\n{submit}\nwhile {poll}; do sleep {interval}; done\n{done}\n",
            t.script.strip_suffix('\n').unwrap_or(&t.script),
            job.strip_suffix('\n').unwrap_or(&job),
        )
    }
}

impl Executor for DispatcherExecutor {
    fn name(&self) -> &str {
        &self.name
    }

    fn render(&self, template: &ScriptTemplate) -> ScriptTemplate {
        let script = match self.machine.batch_type {
            BatchType::Sim => self.sim_wrapper(template),
            _ => self.dialect_wrapper(template),
        };
        ScriptTemplate {
            command: vec!["sh".into()],
            script,
            ..template.clone()
        }
    }
}
