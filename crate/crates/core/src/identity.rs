//! Checks of the Ghirlanda-Guerra identities and of the invariance of
//! quenched averages under random tilts and deletions.
//!
//! Every check draws `budget.outer` measures on streams derived from the
//! caller's stream, so results depend only on (sampler, parameters, stream).
//! Grid variants share one set of measure draws across cells.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{usage, Error, Result};
use crate::function::{Observable, OverlapFunction, MAX_REPLICAS};
use crate::gibbs::{gibbs_averages, inner_draws, over_measures, overlaps_of, Budget, ReplicaSampler};
use crate::measure::{MeasureSample, SamplerSpec};
use crate::rng::RandomStream;
use crate::stats::{
    ks_two_sample, mean_and_se, z_threshold_for_level, z_zero_test_at, CompensatedSum, KsTest, MCEstimate,
    TestVerdict, ZTest, DEFAULT_Z_THRESHOLD,
};
use crate::transforms::{
    delete, draw_signs, iterated_delete, retained_mass, single_shot_delete, tilt, SignVector, MAX_DELETION_RETRIES,
};

/// Absolute difference below which an equality check passes regardless of z.
pub const DEFAULT_DIFF_FLOOR: f64 = 0.01;

/// Draws with less retained mass are excluded from the per-sample limit gap.
pub const MIN_RETAINED_MASS: f64 = 1e-3;

/// Rounding allowance added to the limit envelope.
pub const LIMIT_SLACK: f64 = 1e-12;

/// Pass rule for equality checks: |z| <= threshold, or |difference| <= floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Decision {
    pub threshold: f64,
    pub floor: f64,
}

impl Default for Decision {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_Z_THRESHOLD,
            floor: DEFAULT_DIFF_FLOOR,
        }
    }
}

impl Decision {
    pub fn new(threshold: f64, floor: f64) -> Result<Self> {
        if threshold.is_nan() || threshold <= 0.0 || floor.is_nan() || floor < 0.0 {
            return usage("z threshold must be positive and the difference floor non-negative");
        }
        Ok(Self { threshold, floor })
    }

    pub fn from_level(level: f64, floor: f64) -> Result<Self> {
        Self::new(z_threshold_for_level(level)?, floor)
    }

    fn judge(&self, diff: &MCEstimate) -> (ZTest, bool) {
        let z = z_zero_test_at(diff, self.threshold);
        let pass = z.verdict.pass || diff.mean.abs() <= self.floor;
        (z, pass)
    }
}

fn estimate(values: &[f64], inner: usize, stream: &RandomStream) -> MCEstimate {
    MCEstimate::from_values(values, inner, stream.seed(), stream.to_string())
}

/// Deduplicating list of observables evaluated together on each measure.
#[derive(Default)]
struct Pool(Vec<Observable>);

impl Pool {
    fn index(&mut self, obs: Observable) -> usize {
        match self.0.iter().position(|o| *o == obs) {
            Some(i) => i,
            None => {
                self.0.push(obs);
                self.0.len() - 1
            }
        }
    }

    fn refs(&self) -> Vec<&Observable> {
        self.0.iter().collect()
    }

    fn max_replicas(&self) -> usize {
        self.0.iter().map(|o| o.replicas()).max().unwrap_or(0)
    }
}

fn column(rows: &[Vec<f64>], i: usize) -> Vec<f64> {
    rows.iter().map(|r| r[i]).collect()
}

fn check_arity(f: &OverlapFunction, n: usize) -> Result<()> {
    if n < 2 {
        return usage(format!("n = {n}: the identities are stated for n >= 2 replicas"));
    }
    if f.arity() > n {
        return usage(format!("function {} needs {} replicas, n = {n}", f.name(), f.arity()));
    }
    Ok(())
}

/// One Ghirlanda-Guerra identity: replica count n, overlap power p, function f.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GGCheckSpec {
    pub n: usize,
    pub p: u32,
    pub function: OverlapFunction,
}

impl GGCheckSpec {
    pub fn new(n: usize, p: u32, function: OverlapFunction) -> Result<Self> {
        let spec = Self { n, p, function };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        check_arity(&self.function, self.n)?;
        if self.p == 0 {
            return usage("overlap power p must be >= 1");
        }
        if self.n + 1 > MAX_REPLICAS {
            return usage(format!("n + 1 must not exceed {MAX_REPLICAS} replicas"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GgReport {
    pub function: String,
    pub n: usize,
    pub p: u32,
    /// `E<f R_{1,n+1}^p>`
    pub lhs: MCEstimate,
    /// `(E<f> E<R_{1,2}^p> + sum_{l=2..n} E<f R_{1,l}^p>) / n`
    pub rhs: MCEstimate,
    /// lhs - rhs, with the standard error of the paired estimator.
    pub residual: MCEstimate,
    /// Standard error of lhs - rhs treating the two sides as independent.
    pub unpaired_se: f64,
    pub z: f64,
    pub verdict: TestVerdict,
    pub floor: f64,
    pub pass: bool,
}

struct GgSlots {
    lhs: usize,
    f: usize,
    moment: usize,
    others: Vec<usize>,
}

/// Residuals of several identities from one set of measure draws.
pub fn gg_grid(
    sampler: &SamplerSpec,
    specs: &[GGCheckSpec],
    budget: &Budget,
    stream: &RandomStream,
    decision: &Decision,
) -> Result<Vec<GgReport>> {
    budget.check()?;
    let mut pool = Pool::default();
    let mut slots = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.check()?;
        let f = &spec.function;
        slots.push(GgSlots {
            lhs: pool.index(f.times_overlap_power(spec.n, spec.p)?),
            f: pool.index(f.observable().clone()),
            moment: pool.index(OverlapFunction::one().times_overlap_power(1, spec.p)?),
            others: (1..spec.n)
                .map(|j| Ok(pool.index(f.times_overlap_power(j, spec.p)?)))
                .collect::<Result<_>>()?,
        });
    }
    let deadline = budget.start("gg residual");
    let observables = pool.refs();
    let rows = over_measures(sampler, budget, stream, &deadline, |_, sample, draw| {
        gibbs_averages(&sample, &observables, budget, &draw.derive(1))
    })?;
    let inner = inner_draws(sampler, pool.max_replicas(), budget);
    Ok(specs
        .iter()
        .zip(&slots)
        .map(|(spec, slot)| gg_report(spec, slot, &rows, inner, stream, decision))
        .collect())
}

fn gg_report(
    spec: &GGCheckSpec,
    slot: &GgSlots,
    rows: &[Vec<f64>],
    inner: usize,
    stream: &RandomStream,
    decision: &Decision,
) -> GgReport {
    let n = spec.n as f64;
    let a = column(rows, slot.lhs);
    let b = column(rows, slot.f);
    let c = column(rows, slot.moment);
    let d: Vec<Vec<f64>> = slot.others.iter().map(|&i| column(rows, i)).collect();
    let (a_bar, _) = mean_and_se(&a);
    let (b_bar, _) = mean_and_se(&b);
    let (c_bar, _) = mean_and_se(&c);
    let mut n_rhs: CompensatedSum = d.iter().map(|col| mean_and_se(col).0).collect();
    n_rhs.add(b_bar * c_bar);
    let n_rhs = n_rhs.value();
    // n * lhs - n * rhs keeps exact cancellations exact
    let residual = (n * a_bar - n_rhs) / n;
    // linearized per-draw contributions of each side
    let rhs_terms: Vec<f64> = (0..rows.len())
        .map(|i| {
            let mut s: CompensatedSum = d.iter().map(|col| col[i]).collect();
            s.add(b[i] * c_bar + b_bar * c[i] - b_bar * c_bar);
            s.value() / n
        })
        .collect();
    let psi: Vec<f64> = a.iter().zip(&rhs_terms).map(|(x, y)| x - y).collect();
    let lhs = estimate(&a, inner, stream);
    let rhs = MCEstimate {
        mean: n_rhs / n,
        ..estimate(&rhs_terms, inner, stream)
    };
    let residual = MCEstimate {
        mean: residual,
        ..estimate(&psi, inner, stream)
    };
    let (z, pass) = decision.judge(&residual);
    GgReport {
        function: spec.function.name(),
        n: spec.n,
        p: spec.p,
        unpaired_se: (lhs.se * lhs.se + rhs.se * rhs.se).sqrt(),
        lhs,
        rhs,
        residual,
        z: z.z,
        verdict: z.verdict,
        floor: decision.floor,
        pass,
    }
}

pub fn gg_residual(
    sampler: &SamplerSpec,
    spec: &GGCheckSpec,
    budget: &Budget,
    stream: &RandomStream,
    decision: &Decision,
) -> Result<GgReport> {
    Ok(gg_grid(sampler, std::slice::from_ref(spec), budget, stream, decision)?.remove(0))
}

/// A random transform of a measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    /// Exponential tilt with fresh signs per measure draw.
    Tilt { t: f64 },
    /// `s` successive fair deletions.
    Delete { s: u32 },
    /// One deletion with retention probability 2^-s.
    DeleteOnce { s: u32 },
}

impl Transform {
    fn check(&self) -> Result<()> {
        match *self {
            Transform::Tilt { t } if !t.is_finite() => usage("tilt parameter must be finite"),
            Transform::Delete { s } | Transform::DeleteOnce { s } if s == 0 => usage("deletion count s must be >= 1"),
            _ => Ok(()),
        }
    }

    fn path(&self) -> [u64; 2] {
        match *self {
            Transform::Tilt { t } => [0, t.to_bits()],
            Transform::Delete { s } => [1, s as u64],
            Transform::DeleteOnce { s } => [2, s as u64],
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Transform::Tilt { .. } => "tilt",
            Transform::Delete { .. } => "delete",
            Transform::DeleteOnce { .. } => "delete-once",
        }
    }

    fn t(&self) -> Option<f64> {
        match *self {
            Transform::Tilt { t } => Some(t),
            _ => None,
        }
    }

    fn s(&self) -> Option<u32> {
        match *self {
            Transform::Delete { s } | Transform::DeleteOnce { s } => Some(s),
            _ => None,
        }
    }
}

/// Comparison of `E<f>` before and after a transform.
#[derive(Debug, Clone, Serialize)]
pub struct InvarianceReport {
    pub kind: String,
    pub function: String,
    pub n: usize,
    pub t: Option<f64>,
    pub s: Option<u32>,
    pub baseline: MCEstimate,
    pub transformed: MCEstimate,
    /// transformed - baseline, paired per measure draw.
    pub difference: MCEstimate,
    pub unpaired_se: f64,
    pub z: f64,
    pub verdict: TestVerdict,
    pub floor: f64,
    pub pass: bool,
    /// Degenerate deletions redrawn.
    pub retries: usize,
    pub draws: usize,
}

#[allow(clippy::too_many_arguments)]
fn invariance_report(
    kind: &str,
    function: &OverlapFunction,
    n: usize,
    t: Option<f64>,
    s: Option<u32>,
    base: &[f64],
    transformed: &[f64],
    retries: usize,
    inner: usize,
    stream: &RandomStream,
    decision: &Decision,
) -> InvarianceReport {
    let diff: Vec<f64> = transformed.iter().zip(base).map(|(x, y)| x - y).collect();
    let baseline = estimate(base, inner, stream);
    let transformed = estimate(transformed, inner, stream);
    let difference = estimate(&diff, inner, stream);
    let (z, pass) = decision.judge(&difference);
    InvarianceReport {
        kind: kind.to_string(),
        function: function.name(),
        n,
        t,
        s,
        unpaired_se: (baseline.se * baseline.se + transformed.se * transformed.se).sqrt(),
        baseline,
        transformed,
        difference,
        z: z.z,
        verdict: z.verdict,
        floor: decision.floor,
        pass,
        retries,
        draws: base.len(),
    }
}

fn cells(functions: &[OverlapFunction], ns: &[usize]) -> Result<Vec<(usize, usize)>> {
    if functions.is_empty() || ns.is_empty() {
        return usage("at least one function and one replica count are required");
    }
    for &n in ns {
        if n < 2 {
            return usage(format!("n = {n}: invariance checks are stated for n >= 2"));
        }
    }
    let out: Vec<(usize, usize)> = functions
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| ns.iter().filter(move |&&n| f.arity() <= n).map(move |&n| (fi, n)))
        .collect();
    if out.is_empty() {
        return usage("no function fits any of the requested replica counts");
    }
    Ok(out)
}

struct DrawOutcome {
    base: Vec<f64>,
    transformed: Vec<Vec<f64>>,
    retries: Vec<usize>,
}

/// Invariance reports for every transform, function and admissible n (arity
/// <= n), from one set of measure draws. All tilts of a draw share its signs.
pub fn invariance_grid(
    sampler: &SamplerSpec,
    functions: &[OverlapFunction],
    ns: &[usize],
    transforms: &[Transform],
    budget: &Budget,
    stream: &RandomStream,
    decision: &Decision,
) -> Result<Vec<InvarianceReport>> {
    budget.check()?;
    let cells = cells(functions, ns)?;
    for tr in transforms {
        tr.check()?;
    }
    let observables: Vec<&Observable> = functions.iter().map(|f| f.observable()).collect();
    let needs_signs = transforms.iter().any(|t| matches!(t, Transform::Tilt { .. }));
    let deadline = budget.start("invariance check");
    let outcomes = over_measures(sampler, budget, stream, &deadline, |_, sample, draw| {
        let base = gibbs_averages(&sample, &observables, budget, &draw.derive(1))?;
        let eps = needs_signs.then(|| draw_signs(sample.atoms(), &mut draw.derive(2).rng()));
        let mut transformed = Vec::with_capacity(transforms.len());
        let mut retries = Vec::with_capacity(transforms.len());
        for tr in transforms {
            let path = tr.path();
            let (out, r) = match *tr {
                Transform::Tilt { t } => (tilt(&sample, t, eps.as_ref().expect("signs drawn"))?, 0),
                Transform::Delete { s } => {
                    let d = iterated_delete(&sample, s, &mut draw.derive_path(&[3, path[0], path[1]]).rng())?;
                    (d.sample, d.retries)
                }
                Transform::DeleteOnce { s } => {
                    let d = single_shot_delete(&sample, s, &mut draw.derive_path(&[3, path[0], path[1]]).rng())?;
                    (d.sample, d.retries)
                }
            };
            transformed.push(gibbs_averages(
                &out,
                &observables,
                budget,
                &draw.derive_path(&[4, path[0], path[1]]),
            )?);
            retries.push(r);
        }
        Ok(DrawOutcome {
            base,
            transformed,
            retries,
        })
    })?;
    let mut reports = Vec::new();
    for (ti, tr) in transforms.iter().enumerate() {
        let retries = outcomes.iter().map(|o| o.retries[ti]).sum();
        for &(fi, n) in &cells {
            let base: Vec<f64> = outcomes.iter().map(|o| o.base[fi]).collect();
            let transformed: Vec<f64> = outcomes.iter().map(|o| o.transformed[ti][fi]).collect();
            let inner = inner_draws(sampler, observables[fi].replicas(), budget);
            reports.push(invariance_report(
                tr.kind(),
                &functions[fi],
                n,
                tr.t(),
                tr.s(),
                &base,
                &transformed,
                retries,
                inner,
                stream,
                decision,
            ));
        }
    }
    Ok(reports)
}

fn single_cell(
    sampler: &SamplerSpec,
    f: &OverlapFunction,
    n: usize,
    transform: Transform,
    budget: &Budget,
    stream: &RandomStream,
    decision: &Decision,
) -> Result<InvarianceReport> {
    check_arity(f, n)?;
    let mut reports = invariance_grid(
        sampler,
        std::slice::from_ref(f),
        &[n],
        &[transform],
        budget,
        stream,
        decision,
    )?;
    Ok(reports.remove(0))
}

pub fn tilt_invariance_test(
    sampler: &SamplerSpec,
    f: &OverlapFunction,
    n: usize,
    t: f64,
    budget: &Budget,
    stream: &RandomStream,
    decision: &Decision,
) -> Result<InvarianceReport> {
    single_cell(sampler, f, n, Transform::Tilt { t }, budget, stream, decision)
}

pub fn deletion_invariance_test(
    sampler: &SamplerSpec,
    f: &OverlapFunction,
    n: usize,
    s: u32,
    budget: &Budget,
    stream: &RandomStream,
    decision: &Decision,
) -> Result<InvarianceReport> {
    single_cell(sampler, f, n, Transform::Delete { s }, budget, stream, decision)
}

/// `D = eps_{a_1} + ... + eps_{a_m} - m eps_{a_{m+1}}` for atoms `a_1..a_{m+1}`.
pub fn compute_d(eps: &SignVector, atoms: &[usize]) -> Result<i64> {
    if atoms.len() < 2 {
        return usage("D needs at least two replicas");
    }
    let signs = eps.as_slice();
    if let Some(&bad) = atoms.iter().find(|&&a| a >= signs.len()) {
        return usage(format!("atom index {bad} out of range for {} signs", signs.len()));
    }
    let m = atoms.len() - 1;
    let head: i64 = atoms[..m].iter().map(|&a| signs[a] as i64).sum();
    Ok(head - m as i64 * signs[atoms[m]] as i64)
}

/// `2^k n (n+1) ... (n+k-1)`
pub fn derivative_bound(n: usize, k: usize) -> f64 {
    (0..k).map(|j| 2.0 * (n + j) as f64).product()
}

/// Estimate of the k-th derivative at t = 0 of `E<f>_t`.
#[derive(Debug, Clone, Serialize)]
pub struct DerivativeEstimate {
    pub function: String,
    pub n: usize,
    pub k: usize,
    pub estimate: MCEstimate,
    /// `M_f 2^k n (n+1) ... (n+k-1)`
    pub bound: f64,
    pub max_abs: f64,
    /// Replica configurations evaluated.
    pub draws: usize,
    pub z: f64,
    pub verdict: TestVerdict,
}

/// Derivatives of orders 1..=max_k from shared replica draws: each draw
/// takes n + max_k replicas and order k uses the first n + k of them.
/// Any integrand beyond its bound aborts with `BoundViolation`.
pub fn derivative_grid(
    sampler: &SamplerSpec,
    f: &OverlapFunction,
    n: usize,
    max_k: usize,
    budget: &Budget,
    stream: &RandomStream,
    threshold: f64,
) -> Result<Vec<DerivativeEstimate>> {
    budget.check()?;
    check_arity(f, n)?;
    if max_k == 0 {
        return usage("derivative order k must be >= 1");
    }
    if n + max_k > MAX_REPLICAS {
        return usage(format!("n + k must not exceed {MAX_REPLICAS} replicas"));
    }
    let bounds: Vec<f64> = (1..=max_k).map(|k| f.bound() * derivative_bound(n, k)).collect();
    let deadline = budget.start("derivative at zero");
    let per_draw = over_measures(sampler, budget, stream, &deadline, |_, sample, draw| {
        let eps = draw_signs(sample.atoms(), &mut draw.derive(2).rng());
        let replicas = ReplicaSampler::new(&sample);
        let mut rng = draw.derive(5).rng();
        let mut sums = vec![CompensatedSum::new(); max_k];
        let mut max_abs = vec![0.0f64; max_k];
        let mut atoms = vec![0usize; n + max_k];
        for _ in 0..budget.inner {
            for a in atoms.iter_mut() {
                *a = replicas.draw(&mut rng);
            }
            let mut value = f.eval(&overlaps_of(&sample, &atoms[..n]));
            for j in 0..max_k {
                value *= compute_d(&eps, &atoms[..n + j + 1])? as f64;
                if value.abs() > bounds[j] {
                    return Err(Error::BoundViolation {
                        value: value.abs(),
                        bound: bounds[j],
                    });
                }
                sums[j].add(value);
                max_abs[j] = max_abs[j].max(value.abs());
            }
        }
        let means: Vec<f64> = sums.iter().map(|s| s.value() / budget.inner as f64).collect();
        Ok((means, max_abs))
    })?;
    Ok((0..max_k)
        .map(|j| {
            let values: Vec<f64> = per_draw.iter().map(|d| d.0[j]).collect();
            let estimate = estimate(&values, budget.inner, stream);
            let z = z_zero_test_at(&estimate, threshold);
            DerivativeEstimate {
                function: f.name(),
                n,
                k: j + 1,
                estimate,
                bound: bounds[j],
                max_abs: per_draw.iter().map(|d| d.1[j]).fold(0.0, f64::max),
                draws: budget.outer * budget.inner,
                z: z.z,
                verdict: z.verdict,
            }
        })
        .collect())
}

pub fn derivative_at_zero(
    sampler: &SamplerSpec,
    f: &OverlapFunction,
    n: usize,
    k: usize,
    budget: &Budget,
    stream: &RandomStream,
    threshold: f64,
) -> Result<DerivativeEstimate> {
    if k == 0 {
        return usage("derivative order k must be >= 1");
    }
    Ok(derivative_grid(sampler, f, n, k, budget, stream, threshold)?.remove(k - 1))
}

/// Tilt at large t against the deletion coupled through `eta = (eps + 1) / 2`.
#[derive(Debug, Clone, Serialize)]
pub struct LimitReport {
    /// transformed = `E<f>_t`, baseline = `E<f>'`.
    pub report: InvarianceReport,
    /// `2 n M_f e^{-2t}`; the per-draw envelope divides it by the retained mass.
    pub envelope_factor: f64,
    /// Largest per-draw gap among draws with retained mass >= MIN_RETAINED_MASS.
    pub max_gap: f64,
    pub eligible_draws: usize,
    pub envelope_violations: usize,
    pub min_retained_mass: f64,
}

struct LimitDraw {
    tilted: Vec<f64>,
    deleted: Vec<f64>,
    mass: f64,
    retries: usize,
}

fn coupled_pair(sample: &MeasureSample, t: f64, draw: &RandomStream) -> Result<(MeasureSample, MeasureSample, f64, usize)> {
    let mut rng = draw.derive(2).rng();
    for attempt in 0..=MAX_DELETION_RETRIES {
        let eps = draw_signs(sample.atoms(), &mut rng);
        let eta = eps.retention();
        let mass = retained_mass(sample, &eta);
        if mass > 0.0 {
            return Ok((tilt(sample, t, &eps)?, delete(sample, &eta)?, mass, attempt));
        }
    }
    Err(Error::DegenerateDeletion {
        attempts: MAX_DELETION_RETRIES + 1,
    })
}

/// Limit reports for several functions from one set of draws. `t` may be any
/// non-negative value; small t shows the gap the limit closes.
pub fn limit_grid(
    sampler: &SamplerSpec,
    functions: &[OverlapFunction],
    ns: &[usize],
    t: f64,
    budget: &Budget,
    stream: &RandomStream,
    decision: &Decision,
) -> Result<Vec<LimitReport>> {
    budget.check()?;
    if !(t >= 0.0 && t.is_finite()) {
        return usage("limit check needs a finite t >= 0");
    }
    let cells = cells(functions, ns)?;
    let observables: Vec<&Observable> = functions.iter().map(|f| f.observable()).collect();
    let deadline = budget.start("limit consistency");
    let draws = over_measures(sampler, budget, stream, &deadline, |_, sample, draw| {
        let (tilted, deleted, mass, retries) = coupled_pair(&sample, t, draw)?;
        let avg = draw.derive(4);
        Ok(LimitDraw {
            tilted: gibbs_averages(&tilted, &observables, budget, &avg)?,
            deleted: gibbs_averages(&deleted, &observables, budget, &avg)?,
            mass,
            retries,
        })
    })?;
    let retries = draws.iter().map(|d| d.retries).sum();
    let min_mass = draws.iter().map(|d| d.mass).fold(f64::INFINITY, f64::min);
    Ok(cells
        .into_iter()
        .map(|(fi, n)| {
            let f = &functions[fi];
            let factor = 2.0 * n as f64 * f.bound() * (-2.0 * t).exp();
            let mut max_gap = 0.0f64;
            let mut eligible = 0;
            let mut violations = 0;
            for d in &draws {
                let gap = (d.tilted[fi] - d.deleted[fi]).abs();
                if gap > factor / d.mass + LIMIT_SLACK {
                    violations += 1;
                }
                if d.mass >= MIN_RETAINED_MASS {
                    eligible += 1;
                    max_gap = max_gap.max(gap);
                }
            }
            let tilted: Vec<f64> = draws.iter().map(|d| d.tilted[fi]).collect();
            let deleted: Vec<f64> = draws.iter().map(|d| d.deleted[fi]).collect();
            let inner = inner_draws(sampler, observables[fi].replicas(), budget);
            LimitReport {
                report: invariance_report(
                    "limit",
                    f,
                    n,
                    Some(t),
                    Some(1),
                    &deleted,
                    &tilted,
                    retries,
                    inner,
                    stream,
                    decision,
                ),
                envelope_factor: factor,
                max_gap,
                eligible_draws: eligible,
                envelope_violations: violations,
                min_retained_mass: min_mass,
            }
        })
        .collect())
}

pub fn limit_consistency(
    sampler: &SamplerSpec,
    f: &OverlapFunction,
    n: usize,
    t: f64,
    budget: &Budget,
    stream: &RandomStream,
    decision: &Decision,
) -> Result<LimitReport> {
    check_arity(f, n)?;
    Ok(limit_grid(sampler, std::slice::from_ref(f), &[n], t, budget, stream, decision)?.remove(0))
}

#[derive(Debug, Clone, Serialize)]
pub struct KsCoordinate {
    /// `w<i>` for the i-th largest weight, `q<i><j>` for an overlap.
    pub name: String,
    pub test: KsTest,
}

/// Two-sample comparison of the ranked weights and their overlaps under a
/// measure and under its deletion.
#[derive(Debug, Clone, Serialize)]
pub struct OrderedWeightsReport {
    pub depth: usize,
    pub draws: usize,
    pub s: u32,
    pub level: f64,
    /// Level per coordinate after the Bonferroni correction.
    pub corrected_level: f64,
    pub coordinates: Vec<KsCoordinate>,
    pub retries: usize,
    pub pass: bool,
}

fn ranked_features(sample: &MeasureSample, depth: usize) -> Vec<f64> {
    let order = sample.weights().ranking();
    let w = sample.weights().as_slice();
    let model = sample.overlaps();
    let mut out: Vec<f64> = order[..depth].iter().map(|&i| w[i]).collect();
    for a in 0..depth {
        for b in a + 1..depth {
            out.push(model.overlap(order[a], order[b]));
        }
    }
    out
}

/// Compares the laws of the top `depth` weights and their pairwise overlaps
/// under the sampler and under `s` successive deletions. The two sides use
/// independent measure draws; `budget.outer` draws per side.
pub fn ordered_weights_comparison(
    sampler: &SamplerSpec,
    depth: usize,
    s: u32,
    budget: &Budget,
    level: f64,
    stream: &RandomStream,
) -> Result<OrderedWeightsReport> {
    if depth == 0 || depth > sampler.atoms() {
        return usage(format!(
            "depth L = {depth} must lie in 1..={} (the atom count)",
            sampler.atoms()
        ));
    }
    if budget.outer < 1000 {
        return usage(format!("ordered-weights comparison needs >= 1000 draws, got {}", budget.outer));
    }
    if s == 0 {
        return usage("deletion count s must be >= 1");
    }
    let coordinates = depth + depth * (depth - 1) / 2;
    let corrected = level / coordinates as f64;
    z_threshold_for_level(corrected)?;
    let deadline = budget.start("ordered weights");
    let rows: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..budget.outer as u64)
        .into_par_iter()
        .map(|i| {
            deadline.check()?;
            let base = sampler.sample(&stream.derive_path(&[0, i]))?;
            let other = stream.derive_path(&[1, i]);
            let deleted = iterated_delete(&sampler.sample(&other.derive(0))?, s, &mut other.derive(1).rng())?;
            Ok((
                ranked_features(&base, depth),
                ranked_features(&deleted.sample, depth),
                deleted.retries,
            ))
        })
        .collect::<Result<_>>()?;
    let mut names: Vec<String> = (1..=depth).map(|i| format!("w{i}")).collect();
    for a in 1..=depth {
        for b in a + 1..=depth {
            names.push(format!("q{a}{b}"));
        }
    }
    let coordinates = names
        .into_iter()
        .enumerate()
        .map(|(c, name)| {
            let xs: Vec<f64> = rows.iter().map(|r| r.0[c]).collect();
            let ys: Vec<f64> = rows.iter().map(|r| r.1[c]).collect();
            Ok(KsCoordinate {
                name,
                test: ks_two_sample(&xs, &ys, corrected)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OrderedWeightsReport {
        depth,
        draws: budget.outer,
        s,
        level,
        corrected_level: corrected,
        pass: coordinates.iter().all(|c| c.test.verdict.pass),
        coordinates,
        retries: rows.iter().map(|r| r.2).sum(),
    })
}
