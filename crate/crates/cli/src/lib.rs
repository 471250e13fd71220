//! Batch front end for the stochastica engine.
//!
//! Every command is a pure function of its JSON config and flags. Reports
//! and tables are byte-identical across reruns and thread counts; the run
//! timestamp lives only in the `run.meta.json` sidecar.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde_json::{Map, Value};

pub mod commands;
pub mod format;

pub use format::Format;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const VALIDATION: i32 = 2;
    pub const NUMERICAL: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => exit::VALIDATION,
            CliError::Numerical(_) => exit::NUMERICAL,
        }
    }
}

impl From<stochastica::Error> for CliError {
    fn from(e: stochastica::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "stochastica", version, about = "Stochastic pricing engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON config file; flags override its global keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory for the report, tables and run metadata.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,

    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "STOCHASTICA_THREADS")]
    pub threads: Option<usize>,

    /// Progress notes on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate Euler paths and summarize terminal moments.
    Simulate,
    /// Transition densities by closed form, Fokker-Planck or path integral.
    Density,
    /// Present value by closed form, Monte Carlo, PDE or Green's function.
    Price,
    /// Black-Scholes greeks with finite-difference cross-checks.
    Greeks,
    /// Delta hedge or greek-neutral weights.
    Hedge,
    /// Minimum-variance index weights.
    Index,
    /// Cross-method agreement suite.
    Check,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Density => "density",
            Command::Price => "price",
            Command::Greeks => "greeks",
            Command::Hedge => "hedge",
            Command::Index => "index",
            Command::Check => "check",
        }
    }
}

/// Keys shared by every config file.
#[derive(Debug, Default)]
pub struct Globals {
    pub seed: u64,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
}

/// What a command produced: a report plus named data tables.
#[derive(Debug)]
pub struct Output {
    pub report: Value,
    pub tables: Vec<(String, Vec<u8>)>,
    /// Non-fatal diagnostics for stderr.
    pub warnings: Vec<String>,
    /// Set by `check` when a criterion fails.
    pub failed: bool,
}

impl Output {
    pub fn report(report: Value) -> Self {
        Self {
            report,
            tables: Vec::new(),
            warnings: Vec::new(),
            failed: false,
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<(Map<String, Value>, Globals)> {
    let Some(path) = path else {
        return Ok((Map::new(), Globals::default()));
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))?;
    let Value::Object(mut map) = value else {
        return Err(CliError::Input("config must be a JSON object".into()));
    };
    let mut globals = Globals::default();
    if let Some(v) = map.remove("seed") {
        globals.seed =
            serde_json::from_value(v).map_err(|e| CliError::Input(format!("seed: {e}")))?;
    }
    if let Some(v) = map.remove("format") {
        globals.format =
            Some(serde_json::from_value(v).map_err(|e| CliError::Input(format!("format: {e}")))?);
    }
    if let Some(v) = map.remove("out") {
        globals.out =
            Some(serde_json::from_value(v).map_err(|e| CliError::Input(format!("out: {e}")))?);
    }
    Ok((map, globals))
}

fn write_outputs(
    cli: &Cli,
    dir: &Path,
    format: Format,
    seed: u64,
    output: &Output,
    threads: usize,
) -> CliResult<Vec<String>> {
    let io =
        |e: std::io::Error| CliError::Numerical(format!("cannot write to {}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    let report_name = format!("report.{}", format.extension());
    fs::write(
        dir.join(&report_name),
        format::render(&output.report, format),
    )
    .map_err(io)?;
    let mut files = vec![report_name];
    for (name, bytes) in &output.tables {
        fs::write(dir.join(name), bytes).map_err(io)?;
        files.push(name.clone());
    }
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let meta = serde_json::json!({
        "command": cli.command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "threads": threads,
        "created_unix": created,
        "config": cli.config.as_ref().map(|p| p.display().to_string()),
        "files": files,
    });
    fs::write(dir.join("run.meta.json"), format::to_json(&meta)).map_err(io)?;
    Ok(files)
}

fn execute(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult<bool> {
    let (body, globals) = load_config(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(globals.seed);
    let format = cli.format.or(globals.format).unwrap_or(Format::Json);
    let out = cli.out.clone().or(globals.out);
    let threads = match cli.threads {
        Some(0) => return Err(CliError::Input("--threads must be >= 1".into())),
        Some(n) => n,
        None => rayon::current_num_threads(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Numerical(format!("cannot start worker pool: {e}")))?;
    if cli.verbose > 0 {
        let _ = writeln!(
            stderr,
            "{}: seed {seed}, {threads} threads",
            cli.command.name()
        );
    }
    let output = pool.install(|| commands::dispatch(cli.command, body, seed))?;
    for w in &output.warnings {
        let _ = writeln!(stderr, "warning: {w}");
    }
    match out {
        Some(dir) => {
            let files = write_outputs(cli, &dir, format, seed, &output, threads)?;
            if cli.verbose > 0 {
                let _ = writeln!(stderr, "wrote {} to {}", files.join(", "), dir.display());
            }
        }
        None => {
            stdout
                .write_all(format::render(&output.report, format).as_bytes())
                .map_err(|e| CliError::Numerical(format!("cannot write report: {e}")))?;
        }
    }
    Ok(!output.failed)
}

/// Parse `args` (including the program name), run, and return the exit
/// code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::VALIDATION
            } else {
                exit::SUCCESS
            };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(&cli, stdout, stderr) {
        Ok(true) => exit::SUCCESS,
        Ok(false) => {
            let _ = writeln!(stderr, "error: agreement check failed");
            exit::NUMERICAL
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
