//! A file-backed batch scheduler simulator.
//!
//! Jobs live under `<work_root>/jobs/<job_id>/` as plain files (`script`,
//! `command`, `workdir`, `state`, `submit_time`, `finish_time`, `exit_code`,
//! `stdout`, `stderr`). Submission drops a marker into `<work_root>/queue/`
//! named `<ns-timestamp>-<job_id>`; workers take markers oldest first.

use std::fs;
use std::io;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::executor::{job_script, kill_process_group, BatchType, ResourceSpec};
use crate::state::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobState {
    Queued,
    Running,
    Completed,
    Failed,
    TimedOut,
}

impl JobState {
    pub const ALL: [JobState; 5] = [
        JobState::Queued,
        JobState::Running,
        JobState::Completed,
        JobState::Failed,
        JobState::TimedOut,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "Queued",
            JobState::Running => "Running",
            JobState::Completed => "Completed",
            JobState::Failed => "Failed",
            JobState::TimedOut => "TimedOut",
        }
    }

    pub fn parse_word(word: &str) -> Option<JobState> {
        JobState::ALL.into_iter().find(|s| s.as_str() == word)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Completed | JobState::Failed | JobState::TimedOut)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchJob {
    pub job_id: String,
    pub script_path: PathBuf,
    pub state: JobState,
    /// Milliseconds since the epoch.
    pub submit_time: u64,
    pub finish_time: Option<u64>,
    pub exit_code: Option<i32>,
}

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error("unknown job id `{0}`")]
    UnknownJobId(String),
    #[error("job `{job}`: {message}")]
    Corrupt { job: String, message: String },
    #[error("batch I/O: {0}")]
    Io(#[from] io::Error),
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn now_ns() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0)
}

/// Walltime from a `#OPFLOW walltime=<s>` header line, if any.
pub fn header_walltime(script: &str) -> Option<Duration> {
    script
        .lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix("#OPFLOW walltime="))
        .and_then(|s| s.trim().parse().ok())
        .map(Duration::from_secs)
}

/// Handle on a simulator work root. Cheap to clone.
#[derive(Debug, Clone)]
pub struct SimBatch {
    work_root: PathBuf,
    workers: usize,
    claim: Arc<Mutex<()>>,
    seq: Arc<AtomicU64>,
}

impl SimBatch {
    pub fn new(work_root: impl Into<PathBuf>, workers: usize) -> io::Result<Self> {
        let work_root = work_root.into();
        fs::create_dir_all(work_root.join("jobs"))?;
        fs::create_dir_all(work_root.join("queue"))?;
        Ok(SimBatch {
            work_root,
            workers: workers.max(1),
            claim: Arc::new(Mutex::new(())),
            seq: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn work_root(&self) -> &Path {
        &self.work_root
    }

    fn job_dir(&self, job_id: &str) -> PathBuf {
        self.work_root.join("jobs").join(job_id)
    }

    /// Enqueues `command... <job script>` to run in `workdir`.
    pub fn submit(
        &self,
        command: &[String],
        body: &str,
        workdir: &Path,
        resources: &ResourceSpec,
    ) -> io::Result<BatchJob> {
        let ns = now_ns();
        let job_id = format!(
            "{ns}-r{}-{}",
            std::process::id(),
            self.seq.fetch_add(1, Ordering::SeqCst)
        );
        let dir = self.job_dir(&job_id);
        fs::create_dir_all(&dir)?;
        let script_path = dir.join("script");
        fs::write(&script_path, job_script(BatchType::Sim, resources, command, body))?;
        fs::write(dir.join("command"), serde_json::to_string(command).map_err(io::Error::other)?)?;
        fs::write(dir.join("workdir"), workdir.to_string_lossy().as_bytes())?;
        let submit_time = now_ms();
        fs::write(dir.join("submit_time"), submit_time.to_string())?;
        write_atomic(&dir.join("state"), JobState::Queued.as_str().as_bytes())?;
        fs::write(self.work_root.join("queue").join(format!("{ns:019}-{job_id}")), b"")?;
        Ok(BatchJob {
            job_id,
            script_path,
            state: JobState::Queued,
            submit_time,
            finish_time: None,
            exit_code: None,
        })
    }

    pub fn poll(&self, job_id: &str) -> Result<JobState, BatchError> {
        Ok(self.job(job_id)?.state)
    }

    pub fn job(&self, job_id: &str) -> Result<BatchJob, BatchError> {
        if job_id.is_empty() || job_id.contains('/') || job_id.starts_with('.') {
            return Err(BatchError::UnknownJobId(job_id.to_string()));
        }
        let dir = self.job_dir(job_id);
        let word = match fs::read_to_string(dir.join("state")) {
            Ok(w) => w,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(BatchError::UnknownJobId(job_id.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        let state = JobState::parse_word(word.trim()).ok_or_else(|| BatchError::Corrupt {
            job: job_id.to_string(),
            message: format!("bad state word `{}`", word.trim()),
        })?;
        let read_num = |name: &str| {
            fs::read_to_string(dir.join(name))
                .ok()
                .and_then(|s| s.trim().parse::<i64>().ok())
        };
        Ok(BatchJob {
            job_id: job_id.to_string(),
            script_path: dir.join("script"),
            state,
            submit_time: read_num("submit_time").unwrap_or(0) as u64,
            finish_time: read_num("finish_time").map(|t| t as u64),
            exit_code: read_num("exit_code").map(|c| c as i32),
        })
    }

    /// All job ids, in submission order.
    pub fn jobs(&self) -> io::Result<Vec<String>> {
        let mut ids: Vec<String> = fs::read_dir(self.work_root.join("jobs"))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| !n.starts_with('.'))
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Takes the oldest queued marker, if any.
    fn claim_next(&self) -> io::Result<Option<String>> {
        let _guard = self.claim.lock().expect("claim lock");
        let mut markers: Vec<String> = fs::read_dir(self.work_root.join("queue"))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| !n.starts_with('.'))
            .collect();
        markers.sort();
        for m in markers {
            match fs::remove_file(self.work_root.join("queue").join(&m)) {
                Ok(()) => {
                    let job_id = m.split_once('-').map(|(_, id)| id.to_string()).unwrap_or(m);
                    return Ok(Some(job_id));
                }
                // Another simulator process sharing the root got it first.
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e),
            }
        }
        Ok(None)
    }

    fn finish(&self, dir: &Path, state: JobState, exit_code: Option<i32>) -> io::Result<()> {
        if let Some(c) = exit_code {
            write_atomic(&dir.join("exit_code"), c.to_string().as_bytes())?;
        }
        write_atomic(&dir.join("finish_time"), now_ms().to_string().as_bytes())?;
        write_atomic(&dir.join("state"), state.as_str().as_bytes())
    }

    /// Runs one job to completion, enforcing its walltime.
    pub fn run_job(&self, job_id: &str) -> io::Result<JobState> {
        let dir = self.job_dir(job_id);
        let script_path = dir.join("script");
        let script = fs::read_to_string(&script_path)?;
        let command: Vec<String> = serde_json::from_str(fs::read_to_string(dir.join("command"))?.trim())
            .map_err(io::Error::other)?;
        let workdir = PathBuf::from(fs::read_to_string(dir.join("workdir"))?.trim_end_matches('\n'));
        let walltime = header_walltime(&script);
        write_atomic(&dir.join("start_time"), now_ms().to_string().as_bytes())?;
        write_atomic(&dir.join("state"), JobState::Running.as_str().as_bytes())?;

        let Some((program, args)) = command.split_first() else {
            self.finish(&dir, JobState::Failed, None)?;
            return Ok(JobState::Failed);
        };
        let spawned = Command::new(program)
            .args(args)
            .arg(&script_path)
            .current_dir(&workdir)
            .stdin(Stdio::null())
            .stdout(fs::File::create(dir.join("stdout"))?)
            .stderr(fs::File::create(dir.join("stderr"))?)
            .process_group(0)
            .spawn();
        let mut child = match spawned {
            Ok(c) => c,
            Err(e) => {
                fs::write(dir.join("stderr"), format!("spawn failed: {e}\n"))?;
                self.finish(&dir, JobState::Failed, None)?;
                return Ok(JobState::Failed);
            }
        };
        let start = Instant::now();
        let mut nap = Duration::from_millis(1);
        let (state, code) = loop {
            if let Some(status) = child.try_wait()? {
                let code = status.code();
                let state = if code == Some(0) {
                    JobState::Completed
                } else {
                    JobState::Failed
                };
                break (state, code);
            }
            if walltime.is_some_and(|w| start.elapsed() >= w) {
                kill_process_group(child.id());
                let _ = child.wait();
                break (JobState::TimedOut, None);
            }
            std::thread::sleep(nap);
            nap = (nap * 2).min(Duration::from_millis(20));
        };
        self.finish(&dir, state, code)?;
        Ok(state)
    }

    /// Starts the worker threads. Dropping the daemon stops them once their
    /// current jobs finish.
    pub fn start(&self) -> SimDaemon {
        let stop = Arc::new(AtomicBool::new(false));
        let handles = (0..self.workers)
            .map(|_| {
                let sim = self.clone();
                let stop = Arc::clone(&stop);
                std::thread::spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        match sim.claim_next() {
                            Ok(Some(id)) => {
                                let _ = sim.run_job(&id);
                            }
                            _ => std::thread::sleep(Duration::from_millis(10)),
                        }
                    }
                })
            })
            .collect();
        SimDaemon { stop, handles }
    }
}

/// Running simulator workers.
#[derive(Debug)]
pub struct SimDaemon {
    stop: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
}

impl Drop for SimDaemon {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}
