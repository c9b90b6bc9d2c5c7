//! Bounded functions of the replica overlap matrix.
//!
//! Functions are drawn from a closed registry and represented as products of
//! pair factors, so an evaluator only ever sees overlaps. Observables are
//! stored on their support: replicas a factor never touches are dropped and
//! the rest relabelled in increasing order. Two observables that differ only
//! by an unused replica therefore evaluate through identical code paths.

use std::fmt;

use serde::Serialize;

use crate::error::{usage, Result};

/// Largest replica count an overlap matrix can hold.
pub const MAX_REPLICAS: usize = 8;

/// Overlap matrix of `m` replicas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicaOverlaps {
    m: usize,
    r: [[f64; MAX_REPLICAS]; MAX_REPLICAS],
}

impl ReplicaOverlaps {
    pub fn new(m: usize) -> Self {
        assert!(m <= MAX_REPLICAS, "at most {MAX_REPLICAS} replicas");
        Self {
            m,
            r: [[0.0; MAX_REPLICAS]; MAX_REPLICAS],
        }
    }

    pub fn from_fn(m: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut out = Self::new(m);
        for a in 0..m {
            for b in 0..m {
                out.r[a][b] = f(a, b);
            }
        }
        out
    }

    pub fn replicas(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.r[a][b]
    }

    pub fn set(&mut self, a: usize, b: usize, v: f64) {
        self.r[a][b] = v;
        self.r[b][a] = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Factor {
    /// `R_{a,b}^p`
    Power { a: u8, b: u8, p: u32 },
    /// `1{R_{a,b} >= threshold}`
    AtLeast { a: u8, b: u8, threshold: f64 },
}

impl Factor {
    fn pair(&self) -> (u8, u8) {
        match *self {
            Factor::Power { a, b, .. } | Factor::AtLeast { a, b, .. } => (a, b),
        }
    }

    fn with_pair(self, a: u8, b: u8) -> Self {
        let (a, b) = (a.min(b), a.max(b));
        match self {
            Factor::Power { p, .. } => Factor::Power { a, b, p },
            Factor::AtLeast { threshold, .. } => Factor::AtLeast { a, b, threshold },
        }
    }

    #[inline]
    fn eval(&self, r: &ReplicaOverlaps) -> f64 {
        match *self {
            Factor::Power { a, b, p } => r.get(a as usize, b as usize).powi(p as i32),
            Factor::AtLeast { a, b, threshold } => {
                if r.get(a as usize, b as usize) >= threshold {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn sort_key(&self) -> (u8, u8, u8, u64) {
        match *self {
            Factor::Power { a, b, p } => (a, b, 0, p as u64),
            Factor::AtLeast { a, b, threshold } => (a, b, 1, threshold.to_bits()),
        }
    }
}

/// Product of pair factors, stored on its support.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observable {
    factors: Vec<Factor>,
    replicas: usize,
}

impl Observable {
    pub fn one() -> Self {
        Self {
            factors: Vec::new(),
            replicas: 0,
        }
    }

    /// Builds the canonical form of a factor product.
    pub fn from_factors(factors: Vec<Factor>) -> Result<Self> {
        let mut support: Vec<u8> = Vec::new();
        for f in &factors {
            let (a, b) = f.pair();
            if a == b {
                return usage("factors must couple two distinct replicas");
            }
            if a as usize >= MAX_REPLICAS || b as usize >= MAX_REPLICAS {
                return usage(format!("replica index beyond {MAX_REPLICAS}"));
            }
            support.push(a);
            support.push(b);
        }
        support.sort_unstable();
        support.dedup();
        let relabel = |x: u8| support.iter().position(|&s| s == x).unwrap() as u8;
        let mut relabelled: Vec<Factor> = factors
            .into_iter()
            .map(|f| {
                let (a, b) = f.pair();
                f.with_pair(relabel(a), relabel(b))
            })
            .collect();
        relabelled.sort_by_key(|f| f.sort_key());
        // merge powers of the same pair
        let mut merged: Vec<Factor> = Vec::with_capacity(relabelled.len());
        for f in relabelled {
            match (merged.last_mut(), f) {
                (
                    Some(Factor::Power { a, b, p }),
                    Factor::Power {
                        a: a2,
                        b: b2,
                        p: p2,
                    },
                ) if *a == a2 && *b == b2 => *p += p2,
                _ => merged.push(f),
            }
        }
        Ok(Self {
            factors: merged,
            replicas: support.len(),
        })
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    /// Number of replicas the observable depends on.
    pub fn replicas(&self) -> usize {
        self.replicas
    }

    #[inline]
    pub fn eval(&self, r: &ReplicaOverlaps) -> f64 {
        self.factors.iter().map(|f| f.eval(r)).product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionId {
    /// f = 1
    One,
    /// f = R_{1,2}^p
    Monomial { p: u32 },
    /// f = R_{1,2} R_{1,3}
    PairProduct,
    /// f = 1{R_{1,2} >= threshold}
    Threshold { threshold: f64 },
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FunctionId::One => write!(f, "one"),
            FunctionId::Monomial { p: 1 } => write!(f, "r12"),
            FunctionId::Monomial { p } => write!(f, "r12^{p}"),
            FunctionId::PairProduct => write!(f, "r12r13"),
            FunctionId::Threshold { threshold } => write!(f, "ge:{threshold}"),
        }
    }
}

/// Registry id before any sampler-dependent threshold is resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FunctionSpec {
    Resolved(FunctionId),
    /// Threshold at the median of the sampler's overlap law.
    ThresholdAtMedian,
}

impl FunctionSpec {
    /// Parses a registry id: `one`, `r12`, `r12^p`, `r12r13`, `ge:<c>`, `ge:median`.
    pub fn parse(id: &str) -> Result<Self> {
        let id = id.trim();
        let resolved = match id {
            "one" => FunctionId::One,
            "r12" => FunctionId::Monomial { p: 1 },
            "r12r13" => FunctionId::PairProduct,
            "ge:median" => return Ok(FunctionSpec::ThresholdAtMedian),
            _ => {
                if let Some(p) = id.strip_prefix("r12^") {
                    match p.parse::<u32>() {
                        Ok(p) if p >= 1 => FunctionId::Monomial { p },
                        _ => return usage(format!("unknown function id '{id}': power must be an integer >= 1")),
                    }
                } else if let Some(c) = id.strip_prefix("ge:") {
                    match c.parse::<f64>() {
                        Ok(c) if c.is_finite() => FunctionId::Threshold { threshold: c },
                        _ => return usage(format!("unknown function id '{id}': bad threshold")),
                    }
                } else {
                    return usage(format!("unknown function id '{id}'"));
                }
            }
        };
        Ok(FunctionSpec::Resolved(resolved))
    }

    pub fn resolve(&self, median: f64) -> OverlapFunction {
        match *self {
            FunctionSpec::Resolved(id) => OverlapFunction::new(id),
            FunctionSpec::ThresholdAtMedian => OverlapFunction::new(FunctionId::Threshold { threshold: median }),
        }
    }
}

/// The default test battery.
pub const BATTERY: [&str; 5] = ["one", "r12", "r12^2", "r12r13", "ge:median"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapFunction {
    id: FunctionId,
    arity: usize,
    bound: f64,
    #[serde(skip)]
    observable: Observable,
}

impl OverlapFunction {
    pub fn new(id: FunctionId) -> Self {
        let pow = |a, b, p| Factor::Power { a, b, p };
        let (arity, factors) = match id {
            FunctionId::One => (1, vec![]),
            FunctionId::Monomial { p } => (2, vec![pow(0, 1, p)]),
            FunctionId::PairProduct => (3, vec![pow(0, 1, 1), pow(0, 2, 1)]),
            FunctionId::Threshold { threshold } => (
                2,
                vec![Factor::AtLeast {
                    a: 0,
                    b: 1,
                    threshold,
                }],
            ),
        };
        Self {
            id,
            arity,
            bound: 1.0,
            observable: Observable::from_factors(factors).expect("registry factors are valid"),
        }
    }

    pub fn one() -> Self {
        Self::new(FunctionId::One)
    }

    pub fn id(&self) -> FunctionId {
        self.id
    }

    pub fn name(&self) -> String {
        self.id.to_string()
    }

    /// Smallest replica count the function is defined on.
    pub fn arity(&self) -> usize {
        self.arity
    }

    /// Declared bound M_f with |f| <= M_f.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn observable(&self) -> &Observable {
        &self.observable
    }

    /// Raw factors on the original replica labels (replica 0 = first).
    pub fn factors(&self) -> Vec<Factor> {
        match self.id {
            FunctionId::One => vec![],
            FunctionId::Monomial { p } => vec![Factor::Power { a: 0, b: 1, p }],
            FunctionId::PairProduct => vec![
                Factor::Power { a: 0, b: 1, p: 1 },
                Factor::Power { a: 0, b: 2, p: 1 },
            ],
            FunctionId::Threshold { threshold } => vec![Factor::AtLeast {
                a: 0,
                b: 1,
                threshold,
            }],
        }
    }

    pub fn eval(&self, r: &ReplicaOverlaps) -> f64 {
        self.observable.eval(r)
    }

    /// `f * R_{1,j}^p` with `j` a zero-based replica index.
    pub fn times_overlap_power(&self, j: usize, p: u32) -> Result<Observable> {
        if j == 0 || j >= MAX_REPLICAS {
            return usage(format!("replica index {j} invalid for R_(1,j)"));
        }
        let mut factors = self.factors();
        factors.push(Factor::Power {
            a: 0,
            b: j as u8,
            p,
        });
        Observable::from_factors(factors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_replica(r12: f64) -> ReplicaOverlaps {
        ReplicaOverlaps::from_fn(2, |a, b| if a == b { 1.0 } else { r12 })
    }

    #[test]
    fn registry_parsing() {
        assert_eq!(FunctionSpec::parse("one").unwrap(), FunctionSpec::Resolved(FunctionId::One));
        assert_eq!(
            FunctionSpec::parse("r12^3").unwrap(),
            FunctionSpec::Resolved(FunctionId::Monomial { p: 3 })
        );
        assert_eq!(FunctionSpec::parse("ge:median").unwrap(), FunctionSpec::ThresholdAtMedian);
        assert!(FunctionSpec::parse("r12^0").is_err());
        assert!(FunctionSpec::parse("exp").is_err());
        assert!(FunctionSpec::parse("ge:abc").is_err());
        for id in BATTERY {
            FunctionSpec::parse(id).unwrap();
        }
    }

    #[test]
    fn names_round_trip() {
        for id in ["one", "r12", "r12^2", "r12r13", "ge:0.5"] {
            let f = FunctionSpec::parse(id).unwrap().resolve(0.0);
            assert_eq!(f.name(), id);
        }
    }

    #[test]
    fn evaluation() {
        let r = two_replica(0.5);
        assert_eq!(OverlapFunction::one().eval(&r), 1.0);
        assert_eq!(OverlapFunction::new(FunctionId::Monomial { p: 2 }).eval(&r), 0.25);
        assert_eq!(OverlapFunction::new(FunctionId::Threshold { threshold: 0.5 }).eval(&r), 1.0);
        assert_eq!(OverlapFunction::new(FunctionId::Threshold { threshold: 0.6 }).eval(&r), 0.0);
        let r3 = ReplicaOverlaps::from_fn(3, |a, b| match (a.min(b), a.max(b)) {
            (x, y) if x == y => 1.0,
            (0, 1) => 0.5,
            (0, 2) => 0.25,
            _ => 0.9,
        });
        assert_eq!(OverlapFunction::new(FunctionId::PairProduct).eval(&r3), 0.125);
    }

    #[test]
    fn support_relabelling_makes_equivalent_terms_identical() {
        let one = OverlapFunction::one();
        let a = one.times_overlap_power(1, 2).unwrap();
        let b = one.times_overlap_power(3, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.replicas(), 2);
        assert_eq!(Observable::one().replicas(), 0);
    }

    #[test]
    fn same_pair_powers_merge() {
        let f = OverlapFunction::new(FunctionId::Monomial { p: 1 });
        let obs = f.times_overlap_power(1, 2).unwrap();
        assert_eq!(obs.factors(), &[Factor::Power { a: 0, b: 1, p: 3 }]);
        let pp = OverlapFunction::new(FunctionId::PairProduct).times_overlap_power(3, 1).unwrap();
        assert_eq!(pp.replicas(), 4);
    }

    #[test]
    fn rejects_diagonal_factors() {
        assert!(Observable::from_factors(vec![Factor::Power { a: 1, b: 1, p: 1 }]).is_err());
    }

    proptest! {
        // |f| <= M_f on random overlap matrices with entries in [-1, 1]
        #[test]
        fn battery_respects_declared_bound(
            entries in proptest::collection::vec(-1.0f64..=1.0, 6),
            c in -1.0f64..=1.0,
        ) {
            let r = ReplicaOverlaps::from_fn(4, |a, b| {
                if a == b { 1.0 } else {
                    const PAIR: [[usize; 4]; 4] = [[0, 0, 1, 2], [0, 0, 3, 4], [1, 3, 0, 5], [2, 4, 5, 0]];
                    entries[PAIR[a][b]]
                }
            });
            for id in ["one", "r12", "r12^2", "r12^3", "r12r13"] {
                let f = FunctionSpec::parse(id).unwrap().resolve(c);
                prop_assert!(f.eval(&r).abs() <= f.bound());
            }
            let g = FunctionSpec::parse("ge:median").unwrap().resolve(c);
            prop_assert!(g.eval(&r).abs() <= g.bound());
        }
    }
}
