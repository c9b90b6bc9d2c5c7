//! Sampler laws and quenched averages against independent references.
//!
//! The reference for Poisson-Dirichlet weights is stick breaking:
//! V_i ~ Beta(1 - zeta, i zeta), w_i = V_i prod_{j<i} (1 - V_j). It shares
//! no code with the Poisson-arrival sampler under test.

use gginv_core::function::{FunctionId, OverlapFunction};
use gginv_core::gibbs::{quenched_average, Budget};
use gginv_core::identity::{gg_residual, Decision, GGCheckSpec};
use gginv_core::measure::{pd_truncation_check, sample_pd, SamplerSpec};
use gginv_core::rng::RandomStream;
use gginv_core::stats::{ks_two_sample, mean_and_se};
use rand::Rng;
use rand_distr::{Beta, Distribution};

const STICKS: usize = 4000;

fn stick_breaking<R: Rng>(zeta: f64, rng: &mut R) -> Vec<f64> {
    let mut rest = 1.0;
    (1..=STICKS)
        .map(|i| {
            let v = Beta::new(1.0 - zeta, i as f64 * zeta).unwrap().sample(rng);
            let w = rest * v;
            rest -= w;
            w
        })
        .collect()
}

/// `E sum_i w_i^n = Gamma(n - zeta) / (Gamma(n) Gamma(1 - zeta))`
fn moment(zeta: f64, n: u32) -> f64 {
    (1..n).map(|j| (j as f64 - zeta) / j as f64).product()
}

#[test]
fn moment_formula_matches_stick_breaking() {
    assert_eq!(moment(0.5, 2), 0.5);
    assert_eq!(moment(0.5, 3), 0.375);
    let stream = RandomStream::root(2024);
    let draws: Vec<Vec<f64>> = (0..4000)
        .map(|i| stick_breaking(0.5, &mut stream.derive(i).rng()))
        .collect();
    for n in [2, 3] {
        let sums: Vec<f64> = draws
            .iter()
            .map(|w| w.iter().map(|x| x.powi(n as i32)).sum())
            .collect();
        let (mean, se) = mean_and_se(&sums);
        assert!(
            (mean - moment(0.5, n)).abs() <= 3.0 * se,
            "n={n}: stick breaking {mean} +- {se}"
        );
    }
}

#[test]
fn largest_weight_law_matches_stick_breaking() {
    let reference = RandomStream::root(77);
    let sampler = RandomStream::root(78);
    let n = 10_000;
    let sticks: Vec<f64> = (0..n)
        .map(|i| {
            stick_breaking(0.5, &mut reference.derive(i).rng())
                .into_iter()
                .fold(0.0, f64::max)
        })
        .collect();
    let arrivals: Vec<f64> = (0..n)
        .map(|i| sample_pd(0.5, 4096, &mut sampler.derive(i).rng()).unwrap().as_slice()[0])
        .collect();
    let ks = ks_two_sample(&sticks, &arrivals, 0.01).unwrap();
    assert!(ks.verdict.pass, "{ks:?}");
}

#[test]
fn one_level_cascade_and_pd_agree_in_law() {
    let pd = SamplerSpec::pd(0.5, 4096).unwrap();
    let rpc = SamplerSpec::rpc(vec![0.5], vec![1.0], vec![4096]).unwrap();
    let n = 10_000;
    let top = |s: &SamplerSpec, seed: u64| -> Vec<f64> {
        (0..n)
            .map(|i| s.sample(&RandomStream::root(seed).derive(i)).unwrap().weights().as_slice()[0])
            .collect()
    };
    let ks = ks_two_sample(&top(&pd, 5), &top(&rpc, 6), 0.01).unwrap();
    assert!(ks.verdict.pass, "{ks:?}");
}

#[test]
fn doubling_the_atom_count_does_not_move_the_second_moment() {
    let check = pd_truncation_check(0.5, 4096, 2000, &RandomStream::root(9)).unwrap();
    assert!(check.test.verdict.pass, "{check:?}");
    assert!((check.at_k.mean - 0.5).abs() <= 3.0 * check.at_k.se);
}

#[test]
fn quenched_moments_of_the_one_level_cascade() {
    let sampler = SamplerSpec::rpc(vec![0.5], vec![1.0], vec![4096]).unwrap();
    let budget = Budget::new(1000, 2);
    for (id, expected) in [
        (FunctionId::Monomial { p: 1 }, 0.5),
        (FunctionId::PairProduct, 0.375),
    ] {
        let est = quenched_average(&sampler, &OverlapFunction::new(id), &budget, &RandomStream::root(11)).unwrap();
        assert!((est.mean - expected).abs() <= 3.0 * est.se, "{id}: {est:?}");
    }
}

#[test]
fn fixed_measure_has_point_mass_law() {
    let sampler = SamplerSpec::fixed(gginv_core::measure::standard_negative_control());
    let f = OverlapFunction::new(FunctionId::Monomial { p: 1 });
    let est = quenched_average(&sampler, &f, &Budget::new(100, 2), &RandomStream::root(1)).unwrap();
    assert!((est.mean - 0.68).abs() < 1e-15);
    assert_eq!(est.se, 0.0);
}

#[test]
fn one_level_identity_against_moment_oracle() {
    // lhs = E sum w^3, rhs = (E sum w^2)^2 / 2 + E sum w^2 / 2
    let lhs = moment(0.5, 3);
    let rhs = 0.5 * moment(0.5, 2).powi(2) + 0.5 * moment(0.5, 2);
    assert!((lhs - rhs).abs() < 1e-15);
    let sampler = SamplerSpec::rpc(vec![0.5], vec![1.0], vec![4096]).unwrap();
    let spec = GGCheckSpec::new(2, 1, OverlapFunction::new(FunctionId::Monomial { p: 1 })).unwrap();
    let r = gg_residual(&sampler, &spec, &Budget::new(2000, 2), &RandomStream::root(12), &Decision::default()).unwrap();
    assert!((r.lhs.mean - lhs).abs() <= 3.0 * r.lhs.se, "{r:?}");
    assert!((r.rhs.mean - rhs).abs() <= 3.0 * r.rhs.se, "{r:?}");
    assert!(r.pass);
}
