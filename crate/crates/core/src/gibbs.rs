//! Replica averages `<f>` and quenched averages `E<f>`.

use std::time::{Duration, Instant};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cascade::{ChainMasses, MAX_CASCADE_REPLICAS};
use crate::error::{usage, Error, Result};
use crate::function::{Observable, OverlapFunction, ReplicaOverlaps, MAX_REPLICAS};
use crate::measure::{MeasureSample, OverlapModel, SamplerSpec};
use crate::rng::RandomStream;
use crate::stats::{mean_and_se, CompensatedSum, MCEstimate};

/// Default cap on the number of terms brute-force enumeration may visit.
pub const DEFAULT_ENUMERATION_BUDGET: f64 = 1e8;

/// Default wall-clock limit per check.
pub const DEFAULT_TIME_LIMIT: Duration = Duration::from_secs(600);

/// Monte Carlo sizes and limits shared by the quenched estimators.
#[derive(Debug, Clone, Serialize)]
pub struct Budget {
    /// Independent measure draws.
    pub outer: usize,
    /// Replica draws per measure when an exact average is unavailable.
    pub inner: usize,
    pub enumeration_budget: f64,
    #[serde(skip)]
    pub time_limit: Option<Duration>,
}

impl Budget {
    pub fn new(outer: usize, inner: usize) -> Self {
        Self {
            outer,
            inner,
            enumeration_budget: DEFAULT_ENUMERATION_BUDGET,
            time_limit: Some(DEFAULT_TIME_LIMIT),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.outer < 2 || self.inner < 2 {
            return usage(format!(
                "outer and inner replication counts must be >= 2 (got {} and {})",
                self.outer, self.inner
            ));
        }
        Ok(())
    }

    pub fn start(&self, context: &str) -> Deadline {
        Deadline {
            at: self.time_limit.map(|d| (Instant::now() + d, d)),
            context: context.to_string(),
        }
    }
}

/// Wall-clock guard for one check.
#[derive(Debug, Clone)]
pub struct Deadline {
    at: Option<(Instant, Duration)>,
    context: String,
}

impl Deadline {
    pub fn none() -> Self {
        Self {
            at: None,
            context: String::new(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if let Some((at, limit)) = self.at {
            if Instant::now() > at {
                return Err(Error::TimeLimit {
                    limit_secs: limit.as_secs_f64(),
                    context: self.context.clone(),
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn overlaps_of(sample: &MeasureSample, atoms: &[usize]) -> ReplicaOverlaps {
    let model = sample.overlaps();
    ReplicaOverlaps::from_fn(atoms.len(), |a, b| model.overlap(atoms[a], atoms[b]))
}

/// Exact `<g>` by enumerating all K^m replica configurations.
pub fn gibbs_exact_observable(sample: &MeasureSample, obs: &Observable, budget: f64) -> Result<f64> {
    let m = obs.replicas();
    if m == 0 {
        return Ok(obs.eval(&ReplicaOverlaps::new(0)));
    }
    let w = sample.weights().as_slice();
    let k = w.len();
    let required = (k as f64).powi(m as i32);
    if required > budget {
        return Err(Error::BudgetExceeded { required, budget });
    }
    let mut idx = vec![0usize; m];
    let mut acc = CompensatedSum::new();
    loop {
        let weight: f64 = idx.iter().map(|&a| w[a]).product();
        if weight != 0.0 {
            acc.add(weight * obs.eval(&overlaps_of(sample, &idx)));
        }
        // odometer
        let mut pos = m;
        loop {
            if pos == 0 {
                return Ok(acc.value());
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < k {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Exact `<f>` by enumeration, refusing when K^n exceeds the default budget.
pub fn gibbs_exact(sample: &MeasureSample, f: &OverlapFunction) -> Result<f64> {
    gibbs_exact_observable(sample, f.observable(), DEFAULT_ENUMERATION_BUDGET)
}

/// Samples replica atoms from the measure's weights.
pub struct ReplicaSampler {
    index: Option<WeightedIndex<f64>>,
}

impl ReplicaSampler {
    pub fn new(sample: &MeasureSample) -> Self {
        let w = sample.weights().as_slice();
        let index = if w.len() > 1 {
            Some(WeightedIndex::new(w).expect("normalized weights"))
        } else {
            None
        };
        Self { index }
    }

    #[inline]
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match &self.index {
            Some(ix) => ix.sample(rng),
            None => 0,
        }
    }
}

/// Monte Carlo `<g>` from `draws` independent replica tuples.
pub fn gibbs_mc_observable<R: Rng + ?Sized>(
    sample: &MeasureSample,
    obs: &Observable,
    draws: usize,
    rng: &mut R,
    seed: u64,
    stream: &str,
) -> Result<MCEstimate> {
    if draws < 2 {
        return usage("Monte Carlo averages need at least 2 draws");
    }
    let m = obs.replicas();
    let sampler = ReplicaSampler::new(sample);
    let mut atoms = vec![0usize; m];
    let values: Vec<f64> = (0..draws)
        .map(|_| {
            for a in atoms.iter_mut() {
                *a = sampler.draw(rng);
            }
            obs.eval(&overlaps_of(sample, &atoms))
        })
        .collect();
    let mut est = MCEstimate::from_values(&values, draws, seed, stream);
    est.inner = draws;
    est.outer = 1;
    Ok(est)
}

/// Monte Carlo `<f>` with `draws` replica tuples drawn from `stream`.
pub fn gibbs_mc(
    sample: &MeasureSample,
    f: &OverlapFunction,
    draws: usize,
    stream: &RandomStream,
) -> Result<MCEstimate> {
    gibbs_mc_observable(
        sample,
        f.observable(),
        draws,
        &mut stream.rng(),
        stream.seed(),
        &stream.to_string(),
    )
}

/// How an average was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cascade,
    Enumeration,
    MonteCarlo,
}

/// Chooses the cheapest exact route for a replica count, if one exists.
pub fn exact_method(sample: &MeasureSample, replicas: usize, budget: f64) -> Option<Method> {
    if replicas == 0 {
        return Some(Method::Enumeration);
    }
    if matches!(sample.overlaps(), OverlapModel::Hierarchical(_)) && replicas <= MAX_CASCADE_REPLICAS {
        return Some(Method::Cascade);
    }
    if (sample.atoms() as f64).powi(replicas as i32) <= budget {
        return Some(Method::Enumeration);
    }
    None
}

/// Averages of several observables on one measure. Exact when possible
/// (cascade sums for hierarchical models, enumeration within budget), Monte
/// Carlo with `budget.inner` draws otherwise. Observables with the same
/// replica count share one set of chain masses or replica draws.
pub fn gibbs_averages(
    sample: &MeasureSample,
    observables: &[&Observable],
    budget: &Budget,
    stream: &RandomStream,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; observables.len()];
    let mut counts: Vec<usize> = observables.iter().map(|o| o.replicas()).collect();
    counts.sort_unstable();
    counts.dedup();
    for m in counts {
        let members: Vec<usize> = (0..observables.len())
            .filter(|&i| observables[i].replicas() == m)
            .collect();
        match exact_method(sample, m, budget.enumeration_budget) {
            Some(Method::Cascade) => {
                let masses = ChainMasses::new(sample, m)?;
                for &i in &members {
                    out[i] = masses.average(observables[i])?;
                }
            }
            Some(_) => {
                for &i in &members {
                    out[i] = gibbs_exact_observable(sample, observables[i], budget.enumeration_budget)?;
                }
            }
            None => {
                if m > MAX_REPLICAS {
                    return usage(format!("at most {MAX_REPLICAS} replicas supported"));
                }
                let mut rng = stream.derive(m as u64).rng();
                let sampler = ReplicaSampler::new(sample);
                let mut accs = vec![CompensatedSum::new(); members.len()];
                let mut atoms = vec![0usize; m];
                for _ in 0..budget.inner {
                    for a in atoms.iter_mut() {
                        *a = sampler.draw(&mut rng);
                    }
                    let r = overlaps_of(sample, &atoms);
                    for (acc, &i) in accs.iter_mut().zip(&members) {
                        acc.add(observables[i].eval(&r));
                    }
                }
                for (acc, &i) in accs.iter().zip(&members) {
                    out[i] = acc.value() / budget.inner as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Replica draws per measure the default averaging route uses (1 when exact).
pub fn inner_draws(sampler: &SamplerSpec, replicas: usize, budget: &Budget) -> usize {
    let exact = match sampler {
        SamplerSpec::Pd { .. } | SamplerSpec::Rpc(_) => replicas <= MAX_CASCADE_REPLICAS,
        SamplerSpec::Fixed { measure } => {
            exact_method(measure, replicas, budget.enumeration_budget).is_some()
        }
    };
    if exact {
        1
    } else {
        budget.inner
    }
}

/// Runs `per_draw` over `budget.outer` independent measure draws in
/// parallel. Results come back in draw order regardless of scheduling.
pub fn over_measures<T, F>(
    sampler: &SamplerSpec,
    budget: &Budget,
    stream: &RandomStream,
    deadline: &Deadline,
    per_draw: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, MeasureSample, &RandomStream) -> Result<T> + Sync,
{
    (0..budget.outer as u64)
        .into_par_iter()
        .map(|i| {
            deadline.check()?;
            let draw = stream.derive(i);
            let sample = sampler.sample(&draw.derive(0))?;
            per_draw(i, sample, &draw)
        })
        .collect()
}

/// Quenched average `E<f>` over `budget.outer` measure draws. The standard
/// error is taken across measure draws; inner replica noise, when present,
/// is part of that spread.
pub fn quenched_average(
    sampler: &SamplerSpec,
    f: &OverlapFunction,
    budget: &Budget,
    stream: &RandomStream,
) -> Result<MCEstimate> {
    budget.check()?;
    let deadline = budget.start("quenched average");
    let obs = f.observable();
    let values = over_measures(sampler, budget, stream, &deadline, |_, sample, draw| {
        Ok(gibbs_averages(&sample, &[obs], budget, &draw.derive(1))?[0])
    })?;
    let inner = inner_draws(sampler, obs.replicas(), budget);
    let (mean, se) = mean_and_se(&values);
    Ok(MCEstimate {
        mean,
        se,
        inner,
        outer: values.len(),
        seed: stream.seed(),
        stream: stream.to_string(),
    })
}
