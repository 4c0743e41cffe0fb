//! Argument parsing and the `--config`, `tasks list`, `app` and `worker`
//! commands.
//!
//! stdout carries machine-readable output only; human messages go to stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use signal_hook::consts::{SIGINT, SIGTERM};
use signal_hook::SigId;

use trainforge_core::config::{load_project, process_env, ConfigError};
use trainforge_core::dispatch::{
    dispatch, stop, DispatchOptions, LocalMode, EXIT_CONFIG, EXIT_FAILED, EXIT_STOPPED, EXIT_SUCCEEDED,
};
use trainforge_core::hub::HubClient;
use trainforge_core::models::{DryRunAdapter, TrainerBindings};
use trainforge_core::monitoring::{tail, JsonlSink, MetricEvent, MetricSink, RunStatus, Split};
use trainforge_core::pipeline::{execute, PipelineOptions, EVENTS_FILE};
use trainforge_core::registry;
use trainforge_core::trainer::RunControl;

use crate::app::{self, AppConfig};

/// Exit code for a port that cannot be bound.
pub const EXIT_PORT_IN_USE: i32 = 2;
/// Exit code for usage errors.
pub const EXIT_USAGE: i32 = 2;

pub const CACHE_DIR_ENV: &str = "TRAINFORGE_CACHE_DIR";
pub const DATA_DIR_ENV: &str = "TRAINFORGE_DATA_DIR";
pub const API_TOKEN_ENV: &str = "TRAINFORGE_API_TOKEN";

#[derive(Debug, Parser)]
#[command(name = "trainforge", version, about = "Config-driven model training")]
pub struct Cli {
    /// Run the training project described by this YAML config.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Bind a dry-run adapter to every adapter-bound task: inputs are
    /// recorded, nothing is trained.
    #[arg(long, global = true)]
    pub dry_run_adapters: bool,

    /// Run the job inside this process instead of a worker subprocess.
    #[arg(long, hide = true)]
    pub in_process: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start the HTTP app server.
    App {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 7860)]
        port: u16,
        /// Where projects and the project journal live.
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        /// Directory with the web UI bundle served at `/`.
        #[arg(long, value_name = "DIR")]
        static_dir: Option<PathBuf>,
    },
    /// Task registry queries.
    Tasks {
        #[command(subcommand)]
        command: TasksCommand,
    },
    /// Execute one dispatched run (used by the dispatcher).
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Debug, Subcommand)]
pub enum TasksCommand {
    /// Print every task id, one per line.
    List,
}

#[derive(Debug, Args)]
pub struct WorkerArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub project_dir: PathBuf,
    #[arg(long)]
    pub run_id: String,
    #[arg(long)]
    pub base_dir: PathBuf,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub fingerprint: Option<String>,
    #[arg(long)]
    pub resume: bool,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let bindings = Arc::new(TrainerBindings::new());
    if cli.dry_run_adapters {
        bindings.bind_all_external(Arc::new(DryRunAdapter));
    }
    run_cli(cli, bindings)
}

/// Runs a parsed command with the given adapter bindings.
pub fn run_cli(cli: Cli, bindings: Arc<TrainerBindings>) -> i32 {
    match (cli.command, cli.config) {
        (Some(Command::Tasks { command: TasksCommand::List }), _) => cmd_tasks_list(&mut std::io::stdout().lock()),
        (Some(Command::App {
            host,
            port,
            data_dir,
            static_dir,
        }), _) => {
            let data_dir = data_dir
                .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("trainforge-data"));
            let mut cfg = AppConfig::new(&data_dir);
            cfg.static_dir = static_dir;
            cfg.api_token = std::env::var(API_TOKEN_ENV).ok().filter(|t| !t.is_empty());
            cfg.bindings = bindings;
            cfg.dry_run_adapters = cli.dry_run_adapters;
            cmd_app(&host, port, cfg)
        }
        (Some(Command::Worker(args)), _) => cmd_worker(&args, &bindings),
        (None, Some(path)) => {
            let mode = if cli.in_process {
                LocalMode::InProcess
            } else {
                LocalMode::Subprocess
            };
            cmd_config(&path, bindings, cli.dry_run_adapters, mode)
        }
        (None, None) => {
            eprintln!("nothing to do: pass --config <path> or a subcommand (see --help)");
            EXIT_USAGE
        }
    }
}

pub fn cmd_tasks_list(out: &mut dyn Write) -> i32 {
    let mut ids: Vec<String> = registry::list_tasks().iter().map(|t| t.id.canonical()).collect();
    ids.sort();
    for id in ids {
        if writeln!(out, "{id}").is_err() {
            return EXIT_FAILED;
        }
    }
    EXIT_SUCCEEDED
}

fn report_config_error(e: &ConfigError) {
    let msg = e.to_string();
    match e.key_path() {
        Some(key) if !msg.contains(&format!("`{key}`")) => eprintln!("{msg} (at `{key}`)"),
        _ => eprintln!("{msg}"),
    }
}

/// Signal flag registrations undone on drop.
struct SignalFlags {
    ids: Vec<SigId>,
}

impl SignalFlags {
    fn register(flag: &Arc<AtomicBool>) -> Self {
        let ids = [SIGINT, SIGTERM]
            .into_iter()
            .filter_map(|sig| signal_hook::flag::register(sig, flag.clone()).ok())
            .collect();
        SignalFlags { ids }
    }
}

impl Drop for SignalFlags {
    fn drop(&mut self) {
        for id in self.ids.drain(..) {
            signal_hook::low_level::unregister(id);
        }
    }
}

fn last_error(project_dir: &Path) -> Option<String> {
    let (events, _) = tail(&project_dir.join(EVENTS_FILE), 0).ok()?;
    events
        .iter()
        .rev()
        .find(|e| e.split == Split::System && e.name == "error")
        .and_then(|e| e.value.as_str().map(str::to_string))
}

/// Validates the config, runs it to completion and maps the final status
/// to an exit code.
pub fn cmd_config(path: &Path, bindings: Arc<TrainerBindings>, dry_run_adapters: bool, mode: LocalMode) -> i32 {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("ConfigError: cannot read {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    };
    let project = match load_project(&text, &process_env()) {
        Ok(p) => p,
        Err(e) => {
            report_config_error(&e);
            return EXIT_CONFIG;
        }
    };
    let cwd = std::env::current_dir().unwrap_or_else(|_| PathBuf::from("."));
    let project_dir = cwd.join(&project.config.project_name);
    let mut opts = DispatchOptions::new(&project_dir);
    opts.base_dir = cwd;
    opts.cache_dir = std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from);
    opts.dry_run_adapters = dry_run_adapters;
    opts.bindings = bindings;
    opts.local_mode = mode;
    opts.echo_log = true;
    opts.hub_endpoint = std::env::var("HUB_ENDPOINT").ok();

    let interrupted = Arc::new(AtomicBool::new(false));
    let _signals = SignalFlags::register(&interrupted);
    let handle = match dispatch(&project, project.config.backend, &opts) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_FAILED;
        }
    };
    if let Some(cmd) = handle.command() {
        println!("{cmd}");
    }
    if handle.is_dry_run() {
        eprintln!("no container runtime found; the command above was not executed");
        return EXIT_SUCCEEDED;
    }
    let mut stop_sent = false;
    let status = loop {
        let status = handle.wait_timeout(Duration::from_millis(100));
        if status.is_terminal() {
            break status;
        }
        if interrupted.load(Ordering::SeqCst) && !stop_sent {
            eprintln!("interrupted: stopping run {}", handle.run_id());
            stop_sent = true;
            if let Err(e) = stop(&handle) {
                eprintln!("{e}");
            }
        }
    };
    println!(
        "{}",
        json!({
            "run_id": handle.run_id(),
            "status": status.as_str(),
            "project_dir": project_dir,
            "artifact_dir": project_dir.join("artifact"),
        })
    );
    match status {
        RunStatus::Succeeded => EXIT_SUCCEEDED,
        RunStatus::Stopped => EXIT_STOPPED,
        _ => {
            if let Some(msg) = last_error(&project_dir).or_else(|| handle.message()) {
                eprintln!("run failed: {msg}");
            }
            EXIT_FAILED
        }
    }
}

pub fn cmd_worker(args: &WorkerArgs, bindings: &TrainerBindings) -> i32 {
    let control = RunControl {
        resume: args.resume,
        ..RunControl::default()
    };
    let _signals = SignalFlags::register(&control.stop);
    let loaded = fs::read_to_string(&args.config)
        .map_err(|e| format!("ConfigError: cannot read {}: {e}", args.config.display()))
        .and_then(|text| load_project(&text, &process_env()).map_err(|e| e.to_string()));
    let project = match loaded {
        Ok(p) => p,
        Err(msg) => {
            eprintln!("{msg}");
            if let Ok(sink) = JsonlSink::open(args.project_dir.join(EVENTS_FILE)) {
                let _ = sink.emit(MetricEvent::text(&args.run_id, 0, 0, Split::System, "error", &msg));
                let _ = sink.emit(MetricEvent::status(&args.run_id, 0, 0, RunStatus::Failed));
            }
            return EXIT_CONFIG;
        }
    };
    let hub = HubClient::from_env();
    let mut p = PipelineOptions::new(&args.project_dir, bindings, &args.run_id);
    p.base_dir = args.base_dir.clone();
    p.cache_dir = args.cache_dir.clone();
    p.hub = Some(&hub);
    p.control = control;
    p.fingerprint_hint = args.fingerprint.clone();
    p.echo_log = true;
    match execute(&project, &p) {
        Ok(report) => match report.artifact.status {
            RunStatus::Succeeded => EXIT_SUCCEEDED,
            RunStatus::Stopped => EXIT_STOPPED,
            _ => EXIT_FAILED,
        },
        Err(e) => {
            eprintln!("{e}");
            EXIT_FAILED
        }
    }
}

fn port_error(addr: &str, e: &std::io::Error) -> i32 {
    if e.kind() == std::io::ErrorKind::AddrInUse {
        eprintln!("port in use: cannot listen on {addr}");
    } else {
        eprintln!("cannot listen on {addr}: {e}");
    }
    EXIT_PORT_IN_USE
}

/// Serves the HTTP API until SIGINT or SIGTERM.
pub fn cmd_app(host: &str, port: u16, cfg: AppConfig) -> i32 {
    let addr = format!("{host}:{port}");
    let listener = match std::net::TcpListener::bind(&addr) {
        Ok(l) => l,
        Err(e) => return port_error(&addr, &e),
    };
    if let Err(e) = listener.set_nonblocking(true) {
        return port_error(&addr, &e);
    }
    let state = match app::AppState::open(cfg) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("cannot open project store: {e}");
            return EXIT_FAILED;
        }
    };
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("cannot start runtime: {e}");
            return EXIT_FAILED;
        }
    };
    let served = runtime.block_on(async {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        let local = listener.local_addr()?;
        println!("listening on {local}");
        let _ = std::io::stdout().flush();
        app::serve(listener, state.clone(), shutdown_signal()).await
    });
    let stopped = state.clone();
    let _ = runtime.block_on(runtime.spawn_blocking(move || stopped.shutdown()));
    match served {
        Ok(()) => EXIT_SUCCEEDED,
        Err(e) => {
            eprintln!("server error: {e}");
            EXIT_FAILED
        }
    }
}

async fn shutdown_signal() {
    let mut term = match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
        Ok(s) => s,
        Err(_) => {
            let _ = tokio::signal::ctrl_c().await;
            return;
        }
    };
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = term.recv() => {}
    }
    eprintln!("shutting down");
}
