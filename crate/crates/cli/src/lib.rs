//! Command-line front end: parses a config, runs one experiment and writes its outputs
//! with a checksummed manifest.
//!
//! Exit codes: [`EXIT_OK`], [`EXIT_NEGATIVE`] when a command with a pass/fail verdict
//! fails it, [`EXIT_CONFIG`] for configuration errors and [`EXIT_FAILURE`] for numerical
//! or I/O failures.

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::commands::{n_path, run_command, CommandError};
use crate::manifest::{unix_seconds, Emitter};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NEGATIVE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "rdslab", version, about = "Random dynamical systems on the 2-torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Certify uniform expansion in the future on a point/direction grid.
    CertifyUef(RunArgs),
    /// Certify uniform expansion in the past.
    CertifyUep(RunArgs),
    /// Negative moments of the tangent growth and their decay rate.
    Moments(RunArgs),
    /// Angle tails of singular directions against a fixed vector.
    AngleStats(RunArgs),
    /// Push a curve through a word and dump its nodes.
    PushCurve(RunArgs),
    /// Nearly-conservative and expanding tail checks along a curve.
    NctEt(RunArgs),
    /// Rho-semi-norms of a point-cloud measure.
    Seminorm(RunArgs),
    /// Dyadic norm trace with a boundedness verdict.
    AcDiagnostic(RunArgs),
    /// One good-word convolution step.
    GoodConv(RunArgs),
    /// The staged filtered pipeline with its mass ledger.
    Pipeline(RunArgs),
    /// Filtered and unfiltered norm traces over pipeline stages.
    LyTrace(RunArgs),
    /// Running Cesàro averages of a point cloud.
    Cesaro(RunArgs),
    /// Distance of orbit averages to a reference density.
    Equidistribute(RunArgs),
    /// Classify an orbit as finite, dense or inconclusive.
    Orbit(RunArgs),
    /// Exact binomial tail sums against their bounds.
    Tails(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set certify.x_grid=24`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Main size parameter of the command (word length, stages, depth, ...).
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run even when the constants break the inequalities the command relies on.
    #[arg(long = "override")]
    override_constants: bool,
    /// Output directory; defaults to `<output_dir>/<command>` next to the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

impl Command {
    fn split(self) -> (&'static str, RunArgs) {
        match self {
            Command::CertifyUef(a) => ("certify-uef", a),
            Command::CertifyUep(a) => ("certify-uep", a),
            Command::Moments(a) => ("moments", a),
            Command::AngleStats(a) => ("angle-stats", a),
            Command::PushCurve(a) => ("push-curve", a),
            Command::NctEt(a) => ("nct-et", a),
            Command::Seminorm(a) => ("seminorm", a),
            Command::AcDiagnostic(a) => ("ac-diagnostic", a),
            Command::GoodConv(a) => ("good-conv", a),
            Command::Pipeline(a) => ("pipeline", a),
            Command::LyTrace(a) => ("ly-trace", a),
            Command::Cesaro(a) => ("cesaro", a),
            Command::Equidistribute(a) => ("equidistribute", a),
            Command::Orbit(a) => ("orbit", a),
            Command::Tails(a) => ("tails", a),
        }
    }
}

fn overrides(command: &str, args: &RunArgs) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for item in &args.set {
        let (path, value) = item.split_once('=').ok_or_else(|| format!("--set {item}: expected PATH=VALUE"))?;
        out.push((path.trim().to_string(), value.trim().to_string()));
    }
    if let Some(n) = args.n {
        let path = n_path(command).ok_or_else(|| format!("{command} takes no --N"))?;
        out.push((path.to_string(), n.to_string()));
    }
    if let Some(seed) = args.seed {
        out.push(("seed".into(), seed.to_string()));
    }
    if args.override_constants {
        out.push(("override_constants".into(), "true".into()));
    }
    if let Some(t) = args.threads {
        out.push(("threads".into(), t.to_string()));
    }
    Ok(out)
}

fn execute(command: &str, args: RunArgs) -> i32 {
    let started = unix_seconds();
    let ov = match overrides(command, &args) {
        Ok(ov) => ov,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let loaded = match config::load(&args.config, &ov) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {}: {e}", args.config.display());
            return EXIT_CONFIG;
        }
    };
    let sys = match loaded.system() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let dir = args.out.clone().unwrap_or_else(|| loaded.resolve(&loaded.config.output_dir).join(command));
    let mut emitter = Emitter::new(dir);
    let threads = loaded.config.threads.unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_FAILURE;
        }
    };
    let outcome = pool.install(|| run_command(command, &loaded, &sys, &mut emitter));
    let outcome = match outcome {
        Ok(o) => o,
        Err(CommandError::Config(msg)) => {
            eprintln!("config error: {msg}");
            return EXIT_CONFIG;
        }
        Err(CommandError::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            return EXIT_FAILURE;
        }
        Err(CommandError::Io(e)) => {
            eprintln!("i/o failure: {e}");
            return EXIT_FAILURE;
        }
    };
    let summary = json!({
        "command": command,
        "config": loaded.tree,
        "verdict": outcome.verdict,
        "result": outcome.result,
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    if let Err(e) = emitter.emit("summary.json", text.as_bytes()) {
        eprintln!("i/o failure: {e}");
        return EXIT_FAILURE;
    }
    let dir = emitter.dir().to_path_buf();
    if let Err(e) = emitter.finish(command, &loaded.tree, loaded.config.seed, started) {
        eprintln!("i/o failure: {e}");
        return EXIT_FAILURE;
    }
    match outcome.verdict {
        Some(false) => {
            println!("{command}: verdict negative; outputs in {}", dir.display());
            EXIT_NEGATIVE
        }
        Some(true) => {
            println!("{command}: verdict positive; outputs in {}", dir.display());
            EXIT_OK
        }
        None => {
            println!("{command}: done; outputs in {}", dir.display());
            EXIT_OK
        }
    }
}

/// Parse `args` (including the program name) and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (command, args) = cli.command.split();
    execute(command, args)
}
