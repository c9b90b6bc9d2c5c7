//! Experiment configs: flat `key = value` lines, `#` comments, repeated keys
//! (or comma-separated values) form lists.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use gginv_core::function::{FunctionSpec, OverlapFunction, BATTERY, MAX_REPLICAS};
use gginv_core::gibbs::{Budget, DEFAULT_ENUMERATION_BUDGET};
use gginv_core::identity::{Decision, DEFAULT_DIFF_FLOOR};
use gginv_core::measure::{negative_control, standard_negative_control, RpcParams, SamplerSpec, DEFAULT_ATOMS};
use gginv_core::stats::{level_for_z_threshold, z_threshold_for_level, DEFAULT_Z_THRESHOLD};

/// Smallest large-t value accepted for the limit check.
pub const MIN_T_LARGE: f64 = 10.0;

/// Largest deletion count; retention probability 2^-s must stay representable.
pub const MAX_S: u32 = 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Kind {
    GgCheck,
    TiltCheck,
    DeleteCheck,
    DerivativeCheck,
    LimitCheck,
    WeightsDist,
    NegativeControl,
    /// Every check kind in one run.
    Suite,
}

impl Kind {
    pub const ALL: [Kind; 8] = [
        Kind::GgCheck,
        Kind::TiltCheck,
        Kind::DeleteCheck,
        Kind::DerivativeCheck,
        Kind::LimitCheck,
        Kind::WeightsDist,
        Kind::NegativeControl,
        Kind::Suite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::GgCheck => "gg-check",
            Kind::TiltCheck => "tilt-check",
            Kind::DeleteCheck => "delete-check",
            Kind::DerivativeCheck => "derivative-check",
            Kind::LimitCheck => "limit-check",
            Kind::WeightsDist => "weights-dist",
            Kind::NegativeControl => "negative-control",
            Kind::Suite => "suite",
        }
    }

    /// Check kinds the experiment runs.
    pub fn checks(self) -> &'static [Kind] {
        match self {
            Kind::Suite => &[
                Kind::GgCheck,
                Kind::TiltCheck,
                Kind::DeleteCheck,
                Kind::DerivativeCheck,
                Kind::LimitCheck,
                Kind::WeightsDist,
            ],
            Kind::NegativeControl => &[Kind::GgCheck, Kind::TiltCheck, Kind::DeleteCheck, Kind::WeightsDist],
            Kind::GgCheck => &[Kind::GgCheck],
            Kind::TiltCheck => &[Kind::TiltCheck],
            Kind::DeleteCheck => &[Kind::DeleteCheck],
            Kind::DerivativeCheck => &[Kind::DerivativeCheck],
            Kind::LimitCheck => &[Kind::LimitCheck],
            Kind::WeightsDist => &[Kind::WeightsDist],
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Kind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown experiment kind '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl Diagnostic {
    fn new(line: Option<usize>, key: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            line,
            key: key.map(str::to_string),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, &self.key) {
            (Some(l), Some(k)) => write!(f, "line {l}: {k}: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            (None, Some(k)) => write!(f, "{k}: {}", self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    /// 1-based line in the config text; 0 for command-line overrides.
    pub line: usize,
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: Vec<Entry>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, Vec<Diagnostic>> {
        let mut entries = Vec::new();
        let mut diags = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            match body.split_once('=') {
                Some((k, v)) if !k.trim().is_empty() => entries.push(Entry {
                    line: line_no,
                    key: k.trim().to_ascii_lowercase(),
                    value: v.trim().to_string(),
                }),
                _ => diags.push(Diagnostic::new(Some(line_no), None, format!("expected `key = value`, got '{body}'"))),
            }
        }
        if diags.is_empty() {
            Ok(Self { entries })
        } else {
            Err(diags)
        }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// Replaces every value of `key`, as a command-line flag does.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.retain(|e| e.key != key);
        self.entries.push(Entry {
            line: 0,
            key: key.to_string(),
            value: value.into(),
        });
    }

    pub fn remove(&mut self, key: &str) {
        self.entries.retain(|e| e.key != key);
    }

    fn get(&self, key: &str) -> Vec<&Entry> {
        self.entries.iter().filter(|e| e.key == key).collect()
    }

    /// Values of every key, in key order, for the report.
    pub fn echo(&self) -> BTreeMap<String, Vec<String>> {
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for e in &self.entries {
            out.entry(e.key.clone()).or_default().push(e.value.clone());
        }
        out
    }
}

const KEYS: &[&str] = &[
    "kind",
    "family",
    "zeta",
    "q",
    "branching",
    "atoms",
    "self_overlap",
    "weight",
    "gram_row",
    "function",
    "n",
    "p",
    "t",
    "t_large",
    "s",
    "k",
    "depth",
    "outer",
    "inner",
    "samples",
    "seed",
    "level",
    "z_threshold",
    "ks_level",
    "floor",
    "time_limit",
    "enumeration_budget",
];

/// A validated experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub sampler: SamplerSpec,
    pub functions: Vec<OverlapFunction>,
    pub ns: Vec<usize>,
    pub ps: Vec<u32>,
    pub ts: Vec<f64>,
    pub t_large: Vec<f64>,
    pub ss: Vec<u32>,
    /// Highest derivative order.
    pub k: usize,
    /// Number of ranked weights compared in law.
    pub depth: usize,
    pub outer: usize,
    pub inner: usize,
    /// Measure draws per side of the ordered-weights comparison.
    pub samples: usize,
    pub seed: u64,
    pub decision: Decision,
    pub ks_level: f64,
    pub time_limit: Duration,
    pub enumeration_budget: f64,
    pub echo: BTreeMap<String, Vec<String>>,
}

impl ExperimentConfig {
    /// Validates `raw` for `kind` (or for the config's own `kind` key when
    /// `kind` is None), reporting every problem found.
    pub fn from_raw(raw: &RawConfig, kind: Option<Kind>) -> Result<Self, Vec<Diagnostic>> {
        let mut r = Reader {
            raw,
            diags: Vec::new(),
        };
        for e in raw.entries() {
            if !KEYS.contains(&e.key.as_str()) {
                r.diag(e, format!("unknown key '{}'", e.key));
            }
        }
        let declared: Option<Kind> = r.opt("kind");
        let kind = match (kind, declared) {
            (Some(k), Some(d)) if k != d => {
                r.diag_key("kind", format!("config declares '{d}' but the subcommand is '{k}'"));
                k
            }
            (Some(k), _) => k,
            (None, Some(d)) => d,
            (None, None) => Kind::Suite,
        };
        let checks: BTreeSet<Kind> = kind.checks().iter().copied().collect();

        let sampler = r.sampler(kind);

        let function_ids: Vec<String> = r.list("function", BATTERY.iter().map(|s| s.to_string()).collect());
        let mut specs = Vec::new();
        for id in &function_ids {
            match FunctionSpec::parse(id) {
                Ok(f) => specs.push(f),
                Err(e) => r.diag_key("function", strip_usage(&e.to_string())),
            }
        }
        let median = sampler.as_ref().map(|s| s.overlap_median()).unwrap_or(0.0);
        let functions: Vec<OverlapFunction> = specs.iter().map(|f| f.resolve(median)).collect();

        let ns: Vec<usize> = r.list("n", vec![2, 3]);
        let ps: Vec<u32> = r.list("p", vec![1, 2, 3]);
        let ts: Vec<f64> = r.list("t", vec![0.25, 1.0, 3.0]);
        let t_large: Vec<f64> = r.list("t_large", vec![20.0]);
        let ss: Vec<u32> = r.list("s", vec![1, 2, 3]);
        let k: usize = r.one("k", 3);
        let atoms = sampler.as_ref().map(|s| s.atoms()).unwrap_or(usize::MAX);
        let depth: usize = r.one("depth", atoms.min(3));
        let control = matches!(sampler, Some(SamplerSpec::Fixed { .. }));
        let outer: usize = r.one("outer", if control { 20_000 } else { 2000 });
        let inner: usize = r.one("inner", 1000);
        let samples: usize = r.one("samples", 10_000);
        let seed: u64 = r.one("seed", 1);
        let floor: f64 = r.one("floor", DEFAULT_DIFF_FLOOR);
        let time_limit: f64 = r.one("time_limit", 600.0);
        let enumeration_budget: f64 = r.one("enumeration_budget", DEFAULT_ENUMERATION_BUDGET);

        let level: Option<f64> = r.opt("level");
        let z: Option<f64> = r.opt("z_threshold");
        let threshold = match (level, z) {
            (Some(_), Some(_)) => {
                r.diag_key("z_threshold", "give either level or z_threshold, not both");
                DEFAULT_Z_THRESHOLD
            }
            (Some(a), None) => match z_threshold_for_level(a) {
                Ok(z) => z,
                Err(_) => {
                    r.diag_key("level", format!("significance level must lie in (0, 1), got {a}"));
                    DEFAULT_Z_THRESHOLD
                }
            },
            (None, Some(z)) => z,
            (None, None) => DEFAULT_Z_THRESHOLD,
        };
        let ks_level: f64 = r.one("ks_level", level.unwrap_or(0.01));
        r.require("z_threshold", threshold > 0.0 && threshold.is_finite(), "must be a positive number");
        r.require("ks_level", ks_level > 0.0 && ks_level < 1.0, "must lie in (0, 1)");
        r.require("floor", floor >= 0.0 && floor.is_finite(), "must be a non-negative number");
        r.require("time_limit", time_limit > 0.0 && time_limit.is_finite(), "must be a positive number of seconds");
        r.require("enumeration_budget", enumeration_budget >= 1.0, "must be >= 1");
        r.require("outer", outer >= 2, "needs at least 2 measure draws");
        r.require("inner", inner >= 2, "needs at least 2 replica draws");

        let uses = |c: &[Kind]| c.iter().any(|k| checks.contains(k));
        if uses(&[Kind::GgCheck, Kind::TiltCheck, Kind::DeleteCheck, Kind::DerivativeCheck, Kind::LimitCheck]) {
            r.require("function", !function_ids.is_empty(), "at least one function is required");
            r.require("n", !ns.is_empty(), "at least one replica count is required");
            for &n in &ns {
                r.require("n", n >= 2, format!("n = {n}: the identities are stated for n >= 2 replicas"));
            }
            let max_n = ns.iter().copied().max().unwrap_or(0);
            let explicit = r.present("function");
            for f in functions.iter().filter(|_| explicit) {
                r.require(
                    "function",
                    f.arity() <= max_n,
                    format!("{} needs {} replicas but the largest n is {max_n}", f.name(), f.arity()),
                );
            }
        }
        if uses(&[Kind::GgCheck]) {
            r.require("p", !ps.is_empty(), "at least one power is required");
            for &p in &ps {
                r.require("p", p >= 1, format!("p = {p}: the overlap power must be >= 1"));
            }
            for &n in &ns {
                r.require("n", n < MAX_REPLICAS, format!("n = {n}: n + 1 replicas exceed the limit of {MAX_REPLICAS}"));
            }
        }
        if uses(&[Kind::TiltCheck]) {
            r.require("t", !ts.is_empty(), "at least one tilt value is required");
            for &t in &ts {
                r.require("t", t.is_finite(), format!("t = {t} must be finite"));
            }
        }
        if uses(&[Kind::DeleteCheck, Kind::WeightsDist]) {
            r.require("s", !ss.is_empty(), "at least one deletion count is required");
            for &s in &ss {
                r.require("s", (1..=MAX_S).contains(&s), format!("s = {s} must lie in 1..={MAX_S}"));
            }
        }
        if uses(&[Kind::DerivativeCheck]) {
            r.require("k", k >= 1, "derivative order must be >= 1");
            for &n in &ns {
                r.require(
                    "k",
                    n + k <= MAX_REPLICAS,
                    format!("n + k = {} exceeds the limit of {MAX_REPLICAS} replicas", n + k),
                );
            }
        }
        if uses(&[Kind::LimitCheck]) {
            r.require("t_large", !t_large.is_empty(), "at least one value is required");
            for &t in &t_large {
                r.require("t_large", t >= MIN_T_LARGE && t.is_finite(), format!("t_large = {t} must be finite and >= {MIN_T_LARGE}"));
            }
        }
        if uses(&[Kind::WeightsDist]) {
            let depth_ok = depth >= 1 && depth <= atoms;
            r.require("depth", depth_ok, format!("depth L = {depth} must lie in 1..={atoms} (the atom count)"));
            r.require("samples", samples >= 1000, format!("samples = {samples}: need at least 1000 draws per side"));
        }

        match sampler {
            Some(sampler) if r.diags.is_empty() => Ok(Self {
                kind,
                sampler,
                functions,
                ns,
                ps,
                ts,
                t_large,
                ss,
                k,
                depth,
                outer,
                inner,
                samples,
                seed,
                decision: Decision { threshold, floor },
                ks_level,
                time_limit: Duration::from_secs_f64(time_limit),
                enumeration_budget,
                echo: raw.echo(),
            }),
            _ => Err(r.diags),
        }
    }

    pub fn budget(&self, outer: usize) -> Budget {
        Budget {
            outer,
            inner: self.inner,
            enumeration_budget: self.enumeration_budget,
            time_limit: Some(self.time_limit),
        }
    }

    /// Significance level matching the z threshold.
    pub fn level(&self) -> f64 {
        level_for_z_threshold(self.decision.threshold)
    }
}

fn strip_usage(msg: &str) -> String {
    msg.strip_prefix("usage error: ").unwrap_or(msg).to_string()
}

struct Reader<'a> {
    raw: &'a RawConfig,
    diags: Vec<Diagnostic>,
}

impl Reader<'_> {
    fn diag(&mut self, e: &Entry, msg: impl Into<String>) {
        let line = (e.line > 0).then_some(e.line);
        self.diags.push(Diagnostic::new(line, Some(&e.key), msg));
    }

    fn diag_key(&mut self, key: &str, msg: impl Into<String>) {
        let line = self.raw.get(key).first().map(|e| e.line).filter(|&l| l > 0);
        self.diags.push(Diagnostic::new(line, Some(key), msg));
    }

    fn require(&mut self, key: &str, ok: bool, msg: impl Into<String>) {
        if !ok {
            self.diag_key(key, msg);
        }
    }

    fn present(&self, key: &str) -> bool {
        !self.raw.get(key).is_empty()
    }

    fn list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Vec<T> {
        let entries: Vec<Entry> = self.raw.get(key).into_iter().cloned().collect();
        if entries.is_empty() {
            return default;
        }
        let mut out = Vec::new();
        for e in &entries {
            for item in e.value.split(',').map(str::trim) {
                match item.parse() {
                    Ok(v) => out.push(v),
                    Err(_) => self.diag(e, format!("cannot read '{item}'")),
                }
            }
        }
        out
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Option<T> {
        let entries: Vec<Entry> = self.raw.get(key).into_iter().cloned().collect();
        match entries.as_slice() {
            [] => None,
            [e] => match e.value.parse() {
                Ok(v) => Some(v),
                Err(_) => {
                    self.diag(e, format!("cannot read '{}'", e.value));
                    None
                }
            },
            [_, second, ..] => {
                self.diag(second, "expects a single value");
                None
            }
        }
    }

    fn one<T: FromStr>(&mut self, key: &str, default: T) -> T {
        self.opt(key).unwrap_or(default)
    }

    fn sampler(&mut self, kind: Kind) -> Option<SamplerSpec> {
        let default_family = if kind == Kind::NegativeControl { "negative-control" } else { "rpc" };
        let family: String = self.one("family", default_family.to_string());
        if kind == Kind::NegativeControl && family != "negative-control" {
            self.diag_key("family", "the negative-control experiment runs on the negative-control family");
        }
        let atoms: usize = self.one("atoms", DEFAULT_ATOMS);
        match family.as_str() {
            "pd" => {
                let zeta: f64 = self.one("zeta", 0.5);
                let self_overlap: f64 = self.one("self_overlap", 1.0);
                self.check_zetas(&[zeta]);
                let spec = SamplerSpec::Pd {
                    zeta,
                    atoms,
                    self_overlap,
                };
                self.checked(spec, "family")
            }
            "rpc" => {
                let explicit = self.present("zeta");
                let zetas: Vec<f64> = self.list("zeta", vec![0.25, 0.5]);
                self.check_zetas(&zetas);
                let default_qs = match (explicit, zetas.len()) {
                    (false, _) => vec![0.5, 1.0],
                    (true, 1) => vec![1.0],
                    (true, _) => Vec::new(),
                };
                if explicit && zetas.len() > 1 && !self.present("q") {
                    self.diag_key("zeta", "a cascade with several levels needs one q value per level");
                }
                let qs: Vec<f64> = self.list("q", default_qs);
                let branching: Vec<usize> = match self.list::<usize>("branching", Vec::new()) {
                    b if b.is_empty() => RpcParams::balanced_branching(&zetas, atoms),
                    b if b.len() == 1 => vec![b[0]; zetas.len()],
                    b => b,
                };
                match RpcParams::with_branching(zetas, qs, branching) {
                    Ok(p) => Some(SamplerSpec::Rpc(p)),
                    Err(e) => {
                        self.diag_key("family", strip_usage(&e.to_string()));
                        None
                    }
                }
            }
            "negative-control" => {
                if !self.present("weight") && !self.present("gram_row") {
                    return Some(SamplerSpec::fixed(standard_negative_control()));
                }
                let weights: Vec<f64> = self.list("weight", vec![0.8, 0.2]);
                let k = weights.len();
                let mut rows = Vec::new();
                let entries: Vec<Entry> = self.raw.get("gram_row").into_iter().cloned().collect();
                for e in &entries {
                    let row: Result<Vec<f64>, _> = e
                        .value
                        .split(|c: char| c == ',' || c.is_whitespace())
                        .filter(|s| !s.is_empty())
                        .map(str::parse)
                        .collect();
                    match row {
                        Ok(row) => rows.push(row),
                        Err(_) => self.diag(e, format!("cannot read gram row '{}'", e.value)),
                    }
                }
                if entries.is_empty() {
                    rows = (0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
                }
                match negative_control(&weights, rows) {
                    Ok(m) => Some(SamplerSpec::fixed(m)),
                    Err(e) => {
                        self.diag_key("weight", strip_usage(&e.to_string()));
                        None
                    }
                }
            }
            other => {
                self.diag_key("family", format!("unknown family '{other}' (expected pd, rpc or negative-control)"));
                None
            }
        }
    }

    fn check_zetas(&mut self, zetas: &[f64]) {
        for &z in zetas {
            self.require("zeta", z > 0.0 && z < 1.0, format!("zeta = {z} must lie in (0, 1)"));
        }
    }

    fn checked(&mut self, spec: SamplerSpec, key: &str) -> Option<SamplerSpec> {
        match spec.check() {
            Ok(()) => Some(spec),
            Err(e) => {
                self.diag_key(key, strip_usage(&e.to_string()));
                None
            }
        }
    }
}
