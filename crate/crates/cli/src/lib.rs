//! Subcommands of the `pipetwin` binary.
//!
//! Exit codes: 0 success, 1 invalid input, 2 I/O or forge failure,
//! 3 differences found (`diff` only).

use std::fmt;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use pipetwin_core::{diff, generate, parse, validate, Pipeline, RawConfig};
use pipetwin_twin::acquisition::{VersionQuery, DEFAULT_CI_FILE};
use pipetwin_twin::api::{serve, AppState};
use pipetwin_twin::bus::DEFAULT_BUFFER;
use pipetwin_twin::{Bus, ProjectHandle, Store, Twin};

#[derive(Debug, Parser)]
#[command(name = "pipetwin", version, about = "Digital twin of GitLab CI/CD pipelines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn a CI file into a BPMN 2.0 document.
    Transform(TransformArgs),
    /// Compare two CI files.
    Diff(DiffArgs),
    /// Pull a project's CI history and runs into a store.
    Ingest(IngestArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    pub input: PathBuf,
    /// Write the BPMN document here instead of stdout.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Parse and validate only, then print the report.
    #[arg(long, conflicts_with_all = ["output", "json_model"])]
    pub validate_only: bool,
    /// Also print the model as JSON on stdout.
    #[arg(long, requires = "output")]
    pub json_model: bool,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    pub from: PathBuf,
    pub to: PathBuf,
    /// Print the diff as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// API root of the GitLab instance, e.g. https://gitlab.com/api/v4
    #[arg(long)]
    pub url: String,
    /// Numeric id or full path of the project.
    #[arg(long)]
    pub project: String,
    #[arg(long, env = "PIPETWIN_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    /// Newest versions to fetch.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Newest runs to fetch.
    #[arg(long)]
    pub run_limit: Option<usize>,
    #[arg(long, default_value = DEFAULT_CI_FILE)]
    pub ci_file: String,
    /// Branch or tag to follow instead of the default branch.
    #[arg(long = "ref")]
    pub git_ref: Option<String>,
    #[arg(long, default_value = "pipetwin-store.json")]
    pub store: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: std::net::IpAddr,
    #[arg(long, default_value = "pipetwin-store.json")]
    pub store: PathBuf,
    /// Token for projects registered without one.
    #[arg(long, env = "PIPETWIN_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Io(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Io(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Invalid(m) | Failure::Io(m) => f.write_str(m),
        }
    }
}

type Outcome = Result<ExitCode, Failure>;

pub fn run(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Transform(a) => transform(&a),
        Command::Diff(a) => diff_files(&a),
        Command::Ingest(a) => runtime().and_then(|rt| rt.block_on(ingest(a))),
        Command::Serve(a) => runtime().and_then(|rt| rt.block_on(serve_cmd(a))),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Runtime::new().map_err(|e| Failure::Io(format!("cannot start runtime: {e}")))
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::Io(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

fn stdout(bytes: &[u8]) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    out.write_all(bytes)
        .and_then(|_| out.flush())
        .map_err(|e| Failure::Io(format!("cannot write to stdout: {e}")))
}

/// Parses a local file. Local files get the default provenance so their
/// documents match those of projects using the default CI path.
pub fn load(path: &Path) -> Result<Pipeline, Failure> {
    let bytes = read(path)?;
    parse(&RawConfig::from_bytes(bytes)).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

pub fn transform(a: &TransformArgs) -> Outcome {
    let pipeline = load(&a.input)?;
    if a.validate_only {
        stdout(format!("{}\n", validate(&pipeline)).as_bytes())?;
        return Ok(ExitCode::SUCCESS);
    }
    let doc = generate(&pipeline).map_err(|e| Failure::Invalid(format!("{}: {e}", a.input.display())))?;
    for w in &doc.warnings {
        eprintln!("warning: {w}");
    }
    match &a.output {
        Some(out) => write(out, doc.xml.as_bytes())?,
        None => stdout(doc.xml.as_bytes())?,
    }
    if a.json_model {
        stdout(format!("{}\n", pipeline.to_document().to_json()).as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn diff_files(a: &DiffArgs) -> Outcome {
    // Read both before parsing so a missing file wins over a malformed one.
    let (ra, rb) = (read(&a.from)?, read(&a.to)?);
    let parse_one = |path: &Path, bytes: Vec<u8>| {
        parse(&RawConfig::from_bytes(bytes)).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
    };
    let (pa, pb) = (parse_one(&a.from, ra)?, parse_one(&a.to, rb)?);
    let d = diff(&pa, &pb);
    let text = if a.json { d.to_json() } else { d.to_string() };
    stdout(format!("{text}\n").as_bytes())?;
    Ok(if d.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    })
}

fn open_twin(store: &Path) -> Result<Store, Failure> {
    Store::open(store).map_err(|e| Failure::Io(e.to_string()))
}

pub async fn ingest(a: IngestArgs) -> Outcome {
    let mut handle = ProjectHandle::new(&a.url, a.project.clone())
        .map_err(|e| Failure::Invalid(e.to_string()))?
        .with_ci_file(a.ci_file.clone());
    if let Some(t) = a.token {
        handle = handle.with_token(t);
    }
    if let Some(r) = a.git_ref {
        handle = handle.with_ref(r);
    }
    let twin = Twin::start(Arc::new(open_twin(&a.store)?), Bus::new(DEFAULT_BUFFER)).await;
    let key = handle.key().to_string();
    twin.register(handle).map_err(|e| Failure::Io(e.to_string()))?;
    let query = VersionQuery {
        limit: a.limit,
        ..Default::default()
    };
    let report = twin
        .sync_with(&key, &query, a.run_limit)
        .await
        .map_err(|e| Failure::Io(e.to_string()))?;
    twin.shutdown();

    let mut text = format!(
        "{}: {} commits, {} versions ({} new), {} runs\n",
        report.project, report.snapshots, report.versions, report.new_versions, report.runs
    );
    for r in &report.rejected_runs {
        text.push_str(&format!("skipped run: {r}\n"));
    }
    for f in &report.failures {
        text.push_str(&format!(
            "failed version {}: {}\n",
            f.yaml_hash.as_deref().unwrap_or("?"),
            f.error
        ));
    }
    text.push_str(&format!("store: {}\n", a.store.display()));
    stdout(text.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

pub async fn serve_cmd(a: ServeArgs) -> Outcome {
    let twin = Twin::start(Arc::new(open_twin(&a.store)?), Bus::new(DEFAULT_BUFFER)).await;
    let restored = twin
        .restore_projects(a.token.as_deref())
        .map_err(|e| Failure::Io(e.to_string()))?;
    let listener = tokio::net::TcpListener::bind(SocketAddr::new(a.bind, a.port))
        .await
        .map_err(|e| Failure::Io(format!("cannot listen on {}:{}: {e}", a.bind, a.port)))?;
    let addr = listener.local_addr().map_err(|e| Failure::Io(e.to_string()))?;
    stdout(format!("listening on http://{addr} ({restored} projects)\n").as_bytes())?;
    let state = AppState::new(twin.clone()).with_default_token(a.token);
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    serve(listener, state, shutdown)
        .await
        .map_err(|e| Failure::Io(e.to_string()))?;
    twin.shutdown();
    Ok(ExitCode::SUCCESS)
}
