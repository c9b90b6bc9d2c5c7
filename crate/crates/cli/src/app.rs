//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};
use gginv_core::Error;

use crate::config::{Diagnostic, ExperimentConfig, Kind, RawConfig};
use crate::report::{write_outputs, ReportDocument, RunInfo};
use crate::runner;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_REJECT: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "gginv", version, about = "Monte Carlo checks of overlap identities and invariances")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (`key = value` lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; overrides the config
    #[arg(long, global = true, env = "GGINV_SEED")]
    seed: Option<u64>,

    /// Output directory for report.json and records.csv
    #[arg(long, global = true, default_value = "gginv-out")]
    out: PathBuf,

    /// Two-sided significance level; overrides the config
    #[arg(long, global = true)]
    level: Option<f64>,

    /// Worker threads (default: all cores)
    #[arg(long, global = true, env = "GGINV_JOBS")]
    jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    GgCheck,
    TiltCheck,
    DeleteCheck,
    DerivativeCheck,
    LimitCheck,
    WeightsDist,
    NegativeControl,
    /// Every check kind in one run
    Suite,
    /// Check a config without running it
    Validate,
}

impl Command {
    fn kind(self) -> Option<Kind> {
        Some(match self {
            Command::GgCheck => Kind::GgCheck,
            Command::TiltCheck => Kind::TiltCheck,
            Command::DeleteCheck => Kind::DeleteCheck,
            Command::DerivativeCheck => Kind::DerivativeCheck,
            Command::LimitCheck => Kind::LimitCheck,
            Command::WeightsDist => Kind::WeightsDist,
            Command::NegativeControl => Kind::NegativeControl,
            Command::Suite => Kind::Suite,
            Command::Validate => return None,
        })
    }
}

fn report_diagnostics(diags: &[Diagnostic]) -> i32 {
    for d in diags {
        eprintln!("error: {d}");
    }
    EXIT_USAGE
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Vec<Diagnostic>> {
    let text = match &cli.config {
        Some(path) => fs::read_to_string(path).map_err(|e| {
            vec![Diagnostic {
                line: None,
                key: None,
                message: format!("cannot read {}: {e}", path.display()),
            }]
        })?,
        None if matches!(cli.command, Command::Validate) => {
            return Err(vec![Diagnostic {
                line: None,
                key: None,
                message: "validate needs --config <path>".into(),
            }])
        }
        None => String::new(),
    };
    let mut raw = RawConfig::parse(&text)?;
    if let Some(seed) = cli.seed {
        raw.set("seed", seed.to_string());
    }
    if let Some(level) = cli.level {
        raw.set("level", level.to_string());
        raw.remove("z_threshold");
    }
    ExperimentConfig::from_raw(&raw, cli.command.kind())
}

/// Runs the command line `args` (program name first) and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
        }
    };
    let cfg = match load(&cli) {
        Ok(cfg) => cfg,
        Err(diags) => return report_diagnostics(&diags),
    };
    if matches!(cli.command, Command::Validate) {
        println!("ok");
        return EXIT_PASS;
    }
    if cli.jobs == Some(0) {
        eprintln!("error: --jobs must be at least 1");
        return EXIT_USAGE;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        pool = pool.num_threads(jobs);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_INTERNAL;
        }
    };
    let start = Instant::now();
    let outcome = match pool.install(|| runner::run(&cfg)) {
        Ok(o) => o,
        Err(Error::Usage(msg)) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
        Err(e @ Error::TimeLimit { .. }) => {
            eprintln!("error: aborted: {e}");
            return EXIT_INTERNAL;
        }
        Err(e) => {
            eprintln!("error: internal check failed: {e}");
            return EXIT_INTERNAL;
        }
    };
    let run = RunInfo {
        wall_clock_secs: start.elapsed().as_secs_f64(),
        jobs: pool.current_num_threads(),
    };
    let report = ReportDocument::new(&cfg, &outcome, run);
    if let Err(e) = write_outputs(&cli.out, &report, &outcome.records) {
        eprintln!("error: cannot write to {}: {e}", cli.out.display());
        return EXIT_INTERNAL;
    }
    for s in &outcome.sections {
        println!("{:<18} {}", s.check, if s.pass { "pass" } else { "reject" });
    }
    println!("{:<18} {}  ({})", "verdict", report.suite_verdict, cli.out.display());
    if outcome.pass() {
        EXIT_PASS
    } else {
        EXIT_REJECT
    }
}
