//! `report.json` and `records.csv`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use gginv_core::identity::Decision;
use gginv_core::measure::SamplerSpec;
use serde::Serialize;
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::runner::{Outcome, Section};

pub const REPORT_FILE: &str = "report.json";
pub const RECORDS_FILE: &str = "records.csv";

/// One row of the flat table. Empty cells are quantities the check does
/// not have.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub check_id: String,
    pub family: &'static str,
    pub n: Option<usize>,
    pub p: Option<u32>,
    pub t: Option<f64>,
    pub s: Option<u32>,
    pub lhs: Option<f64>,
    pub rhs: Option<f64>,
    pub diff: Option<f64>,
    pub se: Option<f64>,
    pub z: Option<f64>,
    pub verdict: &'static str,
    pub seed_path: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Thresholds {
    pub decision: Decision,
    /// Two-sided level matching the z threshold.
    pub level: f64,
    pub ks_level: f64,
}

/// Fields that vary between identical runs; dropped by [`canonical`].
#[derive(Debug, Clone, Serialize)]
pub struct RunInfo {
    pub wall_clock_secs: f64,
    pub jobs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportDocument {
    pub tool: &'static str,
    pub version: &'static str,
    pub kind: &'static str,
    pub config: BTreeMap<String, Vec<String>>,
    pub seed: u64,
    pub sampler: SamplerSpec,
    pub functions: Vec<String>,
    pub thresholds: Thresholds,
    pub checks: Vec<Section>,
    pub suite_verdict: &'static str,
    pub run: RunInfo,
}

impl ReportDocument {
    pub fn new(cfg: &ExperimentConfig, outcome: &Outcome, run: RunInfo) -> Self {
        Self {
            tool: "gginv",
            version: env!("CARGO_PKG_VERSION"),
            kind: cfg.kind.name(),
            config: cfg.echo.clone(),
            seed: cfg.seed,
            sampler: cfg.sampler.clone(),
            functions: cfg.functions.iter().map(|f| f.name()).collect(),
            thresholds: Thresholds {
                decision: cfg.decision,
                level: cfg.level(),
                ks_level: cfg.ks_level,
            },
            checks: outcome.sections.clone(),
            suite_verdict: if outcome.pass() { "pass" } else { "reject" },
            run,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Report text with the run-dependent fields removed, for comparing runs.
pub fn canonical(report_json: &str) -> serde_json::Result<String> {
    let mut v: Value = serde_json::from_str(report_json)?;
    if let Value::Object(map) = &mut v {
        map.remove("run");
    }
    serde_json::to_string_pretty(&v)
}

pub fn records_csv(records: &[Record]) -> csv::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Writes both files into `dir`, creating it if needed.
pub fn write_outputs(dir: &Path, report: &ReportDocument, records: &[Record]) -> io::Result<()> {
    let table = records_csv(records).map_err(io::Error::other)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_FILE), report.to_json() + "\n")?;
    fs::write(dir.join(RECORDS_FILE), table)?;
    Ok(())
}
