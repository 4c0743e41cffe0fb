//! Backend dispatch: runs a validated project in-process, in a supervised
//! worker subprocess, or as an emitted container command.
//!
//! One run per project directory at a time, enforced by `<project>/.lock`
//! (run id and pid on two lines). Locks whose pid is dead are reclaimed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::config::{render_for_spawn, Backend, ValidatedProject, DEFAULT_DOCKER_IMAGE};
use crate::hub::HubClient;
use crate::models::TrainerBindings;
use crate::monitoring::{tail, JsonlSink, MetricEvent, MetricSink, RunStatus, Split};
use crate::pipeline::{execute, PipelineOptions, EVENTS_FILE};
use crate::trainer::{RunControl, METADATA_FILE};

pub const LOCK_FILE: &str = ".lock";
pub const SPAWN_CONFIG_FILE: &str = ".spawn.yml";
pub const STOP_GRACE: Duration = Duration::from_secs(10);

/// Worker process exit codes.
pub const EXIT_SUCCEEDED: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_STOPPED: i32 = 130;

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("BackendUnavailable: {0}")]
    BackendUnavailable(String),
    #[error("SpawnFailed: {0}")]
    SpawnFailed(std::io::Error),
    #[error("AlreadyTerminal: run is {}", .0.as_str())]
    AlreadyTerminal(RunStatus),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DispatchError + '_ {
    move |source| DispatchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// lock file
// ---------------------------------------------------------------------------

static LOCK_GUARD: Mutex<()> = Mutex::new(());

pub fn pid_alive(pid: u32) -> bool {
    let Ok(pid) = libc::pid_t::try_from(pid) else {
        return false;
    };
    if pid <= 0 {
        return false;
    }
    // SAFETY: signal 0 performs the permission and existence check only
    let rc = unsafe { libc::kill(pid, 0) };
    rc == 0 || std::io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

/// `(run_id, pid)` of the current lock holder.
pub fn read_lock(project_dir: &Path) -> Option<(String, u32)> {
    let text = fs::read_to_string(project_dir.join(LOCK_FILE)).ok()?;
    let mut lines = text.lines();
    let run_id = lines.next()?.trim().to_string();
    let pid = lines.next()?.trim().parse().ok()?;
    Some((run_id, pid))
}

fn write_lock_file(path: &Path, run_id: &str, pid: u32, create_new: bool) -> std::io::Result<()> {
    let mut opts = fs::OpenOptions::new();
    opts.write(true);
    if create_new {
        opts.create_new(true);
    } else {
        opts.create(true).truncate(true);
    }
    let mut f = opts.open(path)?;
    write!(f, "{run_id}\n{pid}\n")?;
    f.sync_all()
}

/// Takes the project lock for `run_id`, reclaiming a stale one.
pub fn acquire_lock(project_dir: &Path, run_id: &str, pid: u32) -> Result<(), DispatchError> {
    let _g = LOCK_GUARD.lock().unwrap_or_else(|e| e.into_inner());
    fs::create_dir_all(project_dir).map_err(io_err(project_dir))?;
    let path = project_dir.join(LOCK_FILE);
    for _ in 0..2 {
        match write_lock_file(&path, run_id, pid, true) {
            Ok(()) => return Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => match read_lock(project_dir) {
                Some((_, holder)) if pid_alive(holder) => {
                    return Err(DispatchError::BackendUnavailable("locked".into()));
                }
                _ => {
                    log::warn!("reclaiming stale lock in {}", project_dir.display());
                    match fs::remove_file(&path) {
                        Ok(()) => {}
                        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                        Err(e) => return Err(io_err(&path)(e)),
                    }
                }
            },
            Err(e) => return Err(io_err(&path)(e)),
        }
    }
    Err(DispatchError::BackendUnavailable("locked".into()))
}

fn set_lock_pid(project_dir: &Path, run_id: &str, pid: u32) -> Result<(), DispatchError> {
    let _g = LOCK_GUARD.lock().unwrap_or_else(|e| e.into_inner());
    let tmp = project_dir.join(format!("{LOCK_FILE}.{run_id}.tmp"));
    write_lock_file(&tmp, run_id, pid, false).map_err(io_err(&tmp))?;
    let path = project_dir.join(LOCK_FILE);
    fs::rename(&tmp, &path).map_err(io_err(&path))
}

/// Removes the lock if `run_id` still holds it.
pub fn release_lock(project_dir: &Path, run_id: &str) {
    let _g = LOCK_GUARD.lock().unwrap_or_else(|e| e.into_inner());
    if matches!(read_lock(project_dir), Some((held, _)) if held == run_id) {
        let _ = fs::remove_file(project_dir.join(LOCK_FILE));
    }
}

// ---------------------------------------------------------------------------
// spawn spec
// ---------------------------------------------------------------------------

#[derive(Clone, PartialEq, Eq)]
pub struct SpawnSpec {
    pub argv: Vec<String>,
    pub env: BTreeMap<String, String>,
    pub workdir: PathBuf,
    pub expected_artifacts: Vec<String>,
}

impl fmt::Debug for SpawnSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let env: BTreeMap<&str, &str> = self
            .env
            .iter()
            .map(|(k, v)| (k.as_str(), if k == "HF_TOKEN" { crate::config::MASKED_SECRET } else { v.as_str() }))
            .collect();
        f.debug_struct("SpawnSpec")
            .field("argv", &self.argv)
            .field("env", &env)
            .field("workdir", &self.workdir)
            .field("expected_artifacts", &self.expected_artifacts)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalMode {
    Subprocess,
    InProcess,
}

#[derive(Clone)]
pub struct DispatchOptions {
    pub project_dir: PathBuf,
    pub base_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub fingerprint_hint: Option<String>,
    pub run_id: Option<String>,
    pub resume: bool,
    pub local_mode: LocalMode,
    /// Executable providing the `worker` subcommand.
    pub worker_exe: Option<PathBuf>,
    /// Bind the dry-run adapter to every adapter task (passed on to workers).
    pub dry_run_adapters: bool,
    /// Used by in-process runs.
    pub bindings: Arc<TrainerBindings>,
    pub hub_endpoint: Option<String>,
    /// Container runtime for docker mode; `None` means emit the command only.
    pub container_runtime: Option<PathBuf>,
    pub stop_grace: Duration,
    pub echo_log: bool,
}

impl DispatchOptions {
    pub fn new(project_dir: &Path) -> Self {
        DispatchOptions {
            project_dir: project_dir.to_path_buf(),
            base_dir: std::env::current_dir().unwrap_or_else(|_| PathBuf::from(".")),
            cache_dir: None,
            fingerprint_hint: None,
            run_id: None,
            resume: false,
            local_mode: LocalMode::Subprocess,
            worker_exe: None,
            dry_run_adapters: false,
            bindings: Arc::new(TrainerBindings::new()),
            hub_endpoint: None,
            container_runtime: detect_container_runtime(),
            stop_grace: STOP_GRACE,
            echo_log: false,
        }
    }
}

/// First `docker` or `podman` executable on `PATH`.
pub fn detect_container_runtime() -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    for name in ["docker", "podman"] {
        for dir in std::env::split_paths(&path) {
            let candidate = dir.join(name);
            if candidate.is_file() {
                return Some(candidate);
            }
        }
    }
    None
}

fn abs(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn worker_args(opts: &DispatchOptions, run_id: &str, config: &Path, project_dir: &Path, base_dir: &Path) -> Vec<String> {
    let mut argv = vec![
        "worker".to_string(),
        "--config".into(),
        config.display().to_string(),
        "--project-dir".into(),
        project_dir.display().to_string(),
        "--run-id".into(),
        run_id.into(),
        "--base-dir".into(),
        base_dir.display().to_string(),
    ];
    if let Some(c) = &opts.cache_dir {
        argv.extend(["--cache-dir".into(), abs(c).display().to_string()]);
    }
    if let Some(fp) = &opts.fingerprint_hint {
        argv.extend(["--fingerprint".into(), fp.clone()]);
    }
    if opts.resume {
        argv.push("--resume".into());
    }
    if opts.dry_run_adapters {
        argv.push("--dry-run-adapters".into());
    }
    argv
}

fn spawn_env(project: &ValidatedProject, opts: &DispatchOptions) -> BTreeMap<String, String> {
    let mut env = BTreeMap::new();
    if let Some(t) = &project.config.hub.token {
        env.insert("HF_TOKEN".to_string(), t.expose().to_string());
    }
    if let Some(e) = &opts.hub_endpoint {
        env.insert("HUB_ENDPOINT".to_string(), e.clone());
    }
    env
}

fn expected_artifacts() -> Vec<String> {
    vec![EVENTS_FILE.to_string(), format!("artifact/{METADATA_FILE}")]
}

/// The worker invocation for a local subprocess run.
pub fn local_spawn_spec(project: &ValidatedProject, opts: &DispatchOptions, run_id: &str) -> Result<SpawnSpec, DispatchError> {
    let exe = match &opts.worker_exe {
        Some(p) => p.clone(),
        None => std::env::current_exe().map_err(DispatchError::SpawnFailed)?,
    };
    let project_dir = abs(&opts.project_dir);
    let mut argv = vec![exe.display().to_string()];
    argv.extend(worker_args(
        opts,
        run_id,
        &project_dir.join(SPAWN_CONFIG_FILE),
        &project_dir,
        &abs(&opts.base_dir),
    ));
    Ok(SpawnSpec {
        argv,
        env: spawn_env(project, opts),
        workdir: project_dir,
        expected_artifacts: expected_artifacts(),
    })
}

fn shell_quote(s: &str) -> String {
    if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_./:=@".contains(c)) {
        s.to_string()
    } else {
        format!("'{}'", s.replace('\'', r"'\''"))
    }
}

/// `docker pull` followed by `docker run` with the project and data
/// directories mounted; the token is forwarded by name, never inlined.
pub fn docker_command(project: &ValidatedProject, opts: &DispatchOptions, run_id: &str) -> String {
    let image = project.config.docker_image.as_deref().unwrap_or(DEFAULT_DOCKER_IMAGE);
    let project_mount = "/workspace/project";
    let data_mount = "/workspace/data";
    let mut run = vec![
        "docker".to_string(),
        "run".into(),
        "--rm".into(),
        "-e".into(),
        "HF_TOKEN".into(),
        "-e".into(),
        "HUB_ENDPOINT".into(),
        "-v".into(),
        format!("{}:{project_mount}", abs(&opts.project_dir).display()),
        "-v".into(),
        format!("{}:{data_mount}:ro", abs(&opts.base_dir).display()),
        image.to_string(),
        "trainforge".into(),
    ];
    let inner_opts = DispatchOptions {
        cache_dir: None,
        ..opts.clone()
    };
    run.extend(worker_args(
        &inner_opts,
        run_id,
        &Path::new(project_mount).join(SPAWN_CONFIG_FILE),
        Path::new(project_mount),
        Path::new(data_mount),
    ));
    let run: Vec<String> = run.iter().map(|a| shell_quote(a)).collect();
    format!("docker pull {} && {}", shell_quote(image), run.join(" "))
}

// ---------------------------------------------------------------------------
// run handle
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct HandleState {
    status: RunStatus,
    message: Option<String>,
    exit_code: Option<i32>,
}

struct Inner {
    run_id: String,
    backend: Backend,
    project_dir: PathBuf,
    pid: Option<u32>,
    command: Option<String>,
    dry_run: bool,
    control: Option<RunControl>,
    stop_requested: AtomicBool,
    grace: Duration,
    state: Mutex<HandleState>,
    changed: Condvar,
}

/// Shared view of one dispatched run; clones observe the same run.
#[derive(Clone)]
pub struct RunHandle {
    inner: Arc<Inner>,
}

impl fmt::Debug for RunHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunHandle")
            .field("run_id", &self.inner.run_id)
            .field("backend", &self.inner.backend)
            .field("pid", &self.inner.pid)
            .field("status", &self.status())
            .finish()
    }
}

fn legal(from: RunStatus, to: RunStatus) -> bool {
    match from {
        RunStatus::Queued => to == RunStatus::Running,
        RunStatus::Running => to.is_terminal(),
        _ => false,
    }
}

impl RunHandle {
    #[allow(clippy::too_many_arguments)]
    fn new(
        run_id: &str,
        backend: Backend,
        project_dir: &Path,
        pid: Option<u32>,
        command: Option<String>,
        dry_run: bool,
        control: Option<RunControl>,
        grace: Duration,
        status: RunStatus,
        message: Option<String>,
    ) -> Self {
        RunHandle {
            inner: Arc::new(Inner {
                run_id: run_id.to_string(),
                backend,
                project_dir: project_dir.to_path_buf(),
                pid,
                command,
                dry_run,
                control,
                stop_requested: AtomicBool::new(false),
                grace,
                state: Mutex::new(HandleState {
                    status,
                    message,
                    exit_code: None,
                }),
                changed: Condvar::new(),
            }),
        }
    }

    pub fn run_id(&self) -> &str {
        &self.inner.run_id
    }

    pub fn backend(&self) -> Backend {
        self.inner.backend
    }

    pub fn project_dir(&self) -> &Path {
        &self.inner.project_dir
    }

    pub fn pid(&self) -> Option<u32> {
        self.inner.pid
    }

    /// Container invocation emitted for docker runs.
    pub fn command(&self) -> Option<&str> {
        self.inner.command.as_deref()
    }

    /// Docker run whose command was emitted but not executed.
    pub fn is_dry_run(&self) -> bool {
        self.inner.dry_run
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HandleState> {
        self.inner.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn status(&self) -> RunStatus {
        self.lock().status
    }

    pub fn message(&self) -> Option<String> {
        self.lock().message.clone()
    }

    pub fn exit_code(&self) -> Option<i32> {
        self.lock().exit_code
    }

    fn finish(&self, status: RunStatus, message: Option<String>, exit_code: Option<i32>) {
        let mut st = self.lock();
        if legal(st.status, status) {
            st.status = status;
            st.message = message;
            st.exit_code = exit_code;
        } else {
            log::warn!("ignored transition {} -> {}", st.status.as_str(), status.as_str());
        }
        self.inner.changed.notify_all();
    }

    /// Blocks until the run is terminal. Dry-run handles return at once.
    pub fn wait(&self) -> RunStatus {
        let mut st = self.lock();
        while !st.status.is_terminal() && !self.inner.dry_run {
            st = self.inner.changed.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st.status
    }

    /// Like [`wait`](Self::wait) but gives up after `timeout`.
    pub fn wait_timeout(&self, timeout: Duration) -> RunStatus {
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        while !st.status.is_terminal() && !self.inner.dry_run {
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            st = self
                .inner
                .changed
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
        st.status
    }

    pub fn stop_requested(&self) -> bool {
        self.inner.stop_requested.load(Ordering::SeqCst)
    }
}

fn signal(pid: u32, sig: libc::c_int) {
    if let Ok(pid) = libc::pid_t::try_from(pid) {
        // SAFETY: plain signal delivery to our own child
        unsafe {
            libc::kill(pid, sig);
        }
    }
}

/// Graceful stop: SIGTERM (or the in-process stop flag), then SIGKILL once
/// the grace period is over.
pub fn stop(handle: &RunHandle) -> Result<RunHandle, DispatchError> {
    let status = handle.status();
    if status.is_terminal() {
        return Err(DispatchError::AlreadyTerminal(status));
    }
    handle.inner.stop_requested.store(true, Ordering::SeqCst);
    if handle.is_dry_run() {
        // nothing was started; the queued command is withdrawn
        let mut st = handle.lock();
        st.status = RunStatus::Stopped;
        handle.inner.changed.notify_all();
        drop(st);
        release_lock(handle.project_dir(), handle.run_id());
        return Ok(handle.clone());
    }
    if let Some(control) = &handle.inner.control {
        control.request_stop();
        if !handle.wait_timeout(handle.inner.grace).is_terminal() {
            log::warn!("in-process run {} still finishing its step", handle.run_id());
            handle.wait();
        }
        return Ok(handle.clone());
    }
    if let Some(pid) = handle.pid() {
        signal(pid, libc::SIGTERM);
        if !handle.wait_timeout(handle.inner.grace).is_terminal() {
            signal(pid, libc::SIGKILL);
            handle.wait();
        }
    }
    Ok(handle.clone())
}

/// SIGTERM to a process we hold no handle for, SIGKILL after `grace`.
/// Returns whether it is gone.
pub fn terminate_pid(pid: u32, grace: Duration) -> bool {
    signal(pid, libc::SIGTERM);
    let deadline = Instant::now() + grace;
    while pid_alive(pid) && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(50));
    }
    if pid_alive(pid) {
        signal(pid, libc::SIGKILL);
        thread::sleep(Duration::from_millis(50));
    }
    !pid_alive(pid)
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

fn events_len(project_dir: &Path) -> u64 {
    fs::metadata(project_dir.join(EVENTS_FILE)).map(|m| m.len()).unwrap_or(0)
}

fn append_events(project_dir: &Path, events: &[MetricEvent]) {
    match JsonlSink::open(project_dir.join(EVENTS_FILE)) {
        Ok(sink) => {
            for e in events {
                if let Err(err) = sink.emit(e.clone()) {
                    log::error!("cannot record event: {err}");
                }
            }
        }
        Err(err) => log::error!("cannot open event log: {err}"),
    }
}

fn new_run_id(opts: &DispatchOptions) -> String {
    opts.run_id
        .clone()
        .unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string())
}

/// Starts `project` on `mode`.
pub fn dispatch(project: &ValidatedProject, mode: Backend, opts: &DispatchOptions) -> Result<RunHandle, DispatchError> {
    let run_id = new_run_id(opts);
    let dir = &opts.project_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    match mode {
        Backend::SpacesStub => {
            let msg = "NotSupported: the spaces backend is a placeholder and cannot run jobs".to_string();
            append_events(
                dir,
                &[
                    MetricEvent::text(&run_id, 0, 0, Split::System, "error", &msg),
                    MetricEvent::status(&run_id, 0, 0, RunStatus::Failed),
                ],
            );
            Ok(RunHandle::new(
                &run_id,
                mode,
                dir,
                None,
                None,
                false,
                None,
                opts.stop_grace,
                RunStatus::Failed,
                Some(msg),
            ))
        }
        Backend::Docker => dispatch_docker(project, opts, &run_id),
        Backend::Local => match opts.local_mode {
            LocalMode::InProcess => dispatch_in_process(project, opts, &run_id),
            LocalMode::Subprocess => dispatch_subprocess(project, opts, &run_id),
        },
    }
}

fn write_spawn_config(project: &ValidatedProject, dir: &Path) -> Result<(), DispatchError> {
    let path = dir.join(SPAWN_CONFIG_FILE);
    fs::write(&path, render_for_spawn(&project.config)).map_err(io_err(&path))
}

fn dispatch_docker(project: &ValidatedProject, opts: &DispatchOptions, run_id: &str) -> Result<RunHandle, DispatchError> {
    let dir = &opts.project_dir;
    let command = docker_command(project, opts, run_id);
    acquire_lock(dir, run_id, std::process::id())?;
    if let Err(e) = write_spawn_config(project, dir) {
        release_lock(dir, run_id);
        return Err(e);
    }
    let Some(runtime) = &opts.container_runtime else {
        append_events(
            dir,
            &[
                MetricEvent::text(run_id, 0, 0, Split::System, "container_command", &command),
                MetricEvent::status(run_id, 0, 0, RunStatus::Queued),
            ],
        );
        // a dry run holds no process; the lock is not kept
        release_lock(dir, run_id);
        return Ok(RunHandle::new(
            run_id,
            Backend::Docker,
            dir,
            None,
            Some(command),
            true,
            None,
            opts.stop_grace,
            RunStatus::Queued,
            Some("dry-run: no container runtime detected".into()),
        ));
    };
    let runtime_cmd = command.replace("docker ", &format!("{} ", shell_quote(&runtime.display().to_string())));
    let spec = SpawnSpec {
        argv: vec!["/bin/sh".into(), "-c".into(), runtime_cmd],
        env: spawn_env(project, opts),
        workdir: abs(dir),
        expected_artifacts: expected_artifacts(),
    };
    spawn_supervised(&spec, Backend::Docker, Some(command), opts, run_id)
}

fn dispatch_subprocess(project: &ValidatedProject, opts: &DispatchOptions, run_id: &str) -> Result<RunHandle, DispatchError> {
    let spec = local_spawn_spec(project, opts, run_id)?;
    acquire_lock(&opts.project_dir, run_id, std::process::id())?;
    if let Err(e) = write_spawn_config(project, &opts.project_dir) {
        release_lock(&opts.project_dir, run_id);
        return Err(e);
    }
    spawn_supervised(&spec, Backend::Local, None, opts, run_id)
}

fn spawn_supervised(
    spec: &SpawnSpec,
    backend: Backend,
    command: Option<String>,
    opts: &DispatchOptions,
    run_id: &str,
) -> Result<RunHandle, DispatchError> {
    let dir = opts.project_dir.clone();
    let cursor = events_len(&dir);
    let mut cmd = Command::new(&spec.argv[0]);
    cmd.args(&spec.argv[1..])
        .current_dir(&spec.workdir)
        .envs(&spec.env)
        .stdin(Stdio::null());
    if !opts.echo_log {
        cmd.stdout(Stdio::null()).stderr(Stdio::null());
    }
    let child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => {
            release_lock(&dir, run_id);
            return Err(DispatchError::SpawnFailed(e));
        }
    };
    let pid = child.id();
    if let Err(e) = set_lock_pid(&dir, run_id, pid) {
        log::error!("cannot record worker pid in lock: {e}");
    }
    let handle = RunHandle::new(
        run_id,
        backend,
        &dir,
        Some(pid),
        command,
        false,
        None,
        opts.stop_grace,
        RunStatus::Running,
        None,
    );
    let supervised = handle.clone();
    thread::Builder::new()
        .name(format!("supervise-{run_id}"))
        .spawn(move || supervise(child, supervised, cursor))
        .map_err(DispatchError::SpawnFailed)?;
    Ok(handle)
}

fn describe_exit(status: &ExitStatus) -> String {
    use std::os::unix::process::ExitStatusExt;
    match (status.code(), status.signal()) {
        (Some(c), _) => format!("exit code {c}"),
        (None, Some(s)) => format!("signal {s}"),
        _ => "unknown exit".to_string(),
    }
}

fn supervise(mut child: Child, handle: RunHandle, cursor: u64) {
    let exit = child.wait();
    let dir = handle.project_dir().to_path_buf();
    let run_id = handle.run_id().to_string();
    let reported = tail(&dir.join(EVENTS_FILE), cursor)
        .ok()
        .and_then(|(events, _)| events.iter().rev().find_map(MetricEvent::run_status))
        .filter(RunStatus::is_terminal);
    let (status, message, code) = match (&exit, reported) {
        (Ok(st), Some(s)) if st.success() || s != RunStatus::Succeeded => (s, None, st.code()),
        (Ok(st), _) if handle.stop_requested() => {
            let msg = format!("worker stopped ({})", describe_exit(st));
            append_events(
                &dir,
                &[
                    MetricEvent::text(&run_id, 0, 0, Split::System, "warning", &msg),
                    MetricEvent::status(&run_id, 0, 0, RunStatus::Stopped),
                ],
            );
            (RunStatus::Stopped, Some(msg), st.code())
        }
        (Ok(st), _) => {
            let msg = format!("worker crashed ({})", describe_exit(st));
            append_events(
                &dir,
                &[
                    MetricEvent::text(&run_id, 0, 0, Split::System, "error", &msg),
                    MetricEvent::status(&run_id, 0, 0, RunStatus::Failed),
                ],
            );
            (RunStatus::Failed, Some(msg), st.code())
        }
        (Err(e), _) => {
            let msg = format!("lost track of worker: {e}");
            append_events(
                &dir,
                &[
                    MetricEvent::text(&run_id, 0, 0, Split::System, "error", &msg),
                    MetricEvent::status(&run_id, 0, 0, RunStatus::Failed),
                ],
            );
            (RunStatus::Failed, Some(msg), None)
        }
    };
    release_lock(&dir, &run_id);
    handle.finish(status, message, code);
}

fn dispatch_in_process(project: &ValidatedProject, opts: &DispatchOptions, run_id: &str) -> Result<RunHandle, DispatchError> {
    let dir = opts.project_dir.clone();
    acquire_lock(&dir, run_id, std::process::id())?;
    let control = RunControl {
        resume: opts.resume,
        ..RunControl::default()
    };
    let handle = RunHandle::new(
        run_id,
        Backend::Local,
        &dir,
        Some(std::process::id()),
        None,
        false,
        Some(control.clone()),
        opts.stop_grace,
        RunStatus::Running,
        None,
    );
    let project = project.clone();
    let opts = opts.clone();
    let run_handle = handle.clone();
    let run_id = run_id.to_string();
    let spawned = thread::Builder::new().name(format!("run-{run_id}")).spawn(move || {
        let hub = opts.hub_endpoint.as_deref().map(HubClient::new);
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let mut p = PipelineOptions::new(&dir, &opts.bindings, &run_id);
            p.base_dir = opts.base_dir.clone();
            p.cache_dir = opts.cache_dir.clone();
            p.hub = hub.as_ref();
            p.control = control;
            p.fingerprint_hint = opts.fingerprint_hint.clone();
            p.echo_log = opts.echo_log;
            execute(&project, &p)
        }));
        let (status, message) = match outcome {
            Ok(Ok(report)) => (report.artifact.status, None),
            Ok(Err(e)) => (RunStatus::Failed, Some(e.to_string())),
            Err(_) => {
                let msg = "trainer panicked".to_string();
                append_events(
                    &dir,
                    &[
                        MetricEvent::text(&run_id, 0, 0, Split::System, "error", &msg),
                        MetricEvent::status(&run_id, 0, 0, RunStatus::Failed),
                    ],
                );
                (RunStatus::Failed, Some(msg))
            }
        };
        release_lock(&dir, &run_id);
        run_handle.finish(status, message, None);
    });
    if let Err(e) = spawned {
        release_lock(&opts.project_dir, handle.run_id());
        return Err(DispatchError::SpawnFailed(e));
    }
    Ok(handle)
}
