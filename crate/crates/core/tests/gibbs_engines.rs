//! Cross-checks between the Gibbs-average engines.

use gginv_core::cascade::ChainMasses;
use gginv_core::function::{Factor, FunctionId, Observable, OverlapFunction};
use gginv_core::gibbs::{gibbs_exact, gibbs_exact_observable, gibbs_mc, DEFAULT_ENUMERATION_BUDGET};
use gginv_core::measure::{
    negative_control, sample_rpc, Hierarchy, MeasureSample, OverlapModel, RpcParams, WeightVector,
};
use gginv_core::rng::RandomStream;
use proptest::prelude::*;

fn pow(a: u8, b: u8, p: u32) -> Factor {
    Factor::Power { a, b, p }
}

fn observables() -> Vec<Observable> {
    let ge = |a, b, threshold| Factor::AtLeast { a, b, threshold };
    vec![
        vec![pow(0, 1, 1)],
        vec![pow(0, 1, 2), pow(1, 2, 1)],
        vec![pow(0, 1, 1), pow(0, 2, 1), pow(0, 3, 3)],
        vec![ge(0, 1, 0.35), pow(2, 3, 1)],
        vec![pow(0, 1, 1), pow(2, 3, 1), pow(1, 4, 2)],
        vec![ge(0, 2, 0.95), ge(1, 3, 0.3), pow(0, 4, 1)],
    ]
    .into_iter()
    .map(|f| Observable::from_factors(f).unwrap())
    .collect()
}

#[test]
fn cascade_matches_enumeration_on_small_trees() {
    let cases = [
        RpcParams::new(vec![0.5], vec![1.0], 6).unwrap(),
        RpcParams::new(vec![0.3, 0.7], vec![0.3, 0.9], 3).unwrap(),
        RpcParams::new(vec![0.2, 0.5, 0.8], vec![0.1, 0.4, 1.0], 2).unwrap(),
        RpcParams::new(vec![0.25, 0.6], vec![0.0, 1.0], 3).unwrap(),
    ];
    for (ci, params) in cases.iter().enumerate() {
        for seed in 0..3 {
            let s = sample_rpc(params, &mut RandomStream::root(seed).derive(ci as u64).rng()).unwrap();
            for obs in observables() {
                let masses = ChainMasses::new(&s, obs.replicas()).unwrap();
                let fast = masses.average(&obs).unwrap();
                let brute = gibbs_exact_observable(&s, &obs, DEFAULT_ENUMERATION_BUDGET).unwrap();
                assert!(
                    (fast - brute).abs() < 1e-13,
                    "case {ci} seed {seed} {obs:?}: cascade {fast} vs brute {brute}"
                );
            }
        }
    }
}

#[test]
fn cascade_handles_irregular_trees_and_zero_weights() {
    let paths = vec![
        vec![0, 0],
        vec![0, 1],
        vec![0, 2],
        vec![1, 0],
        vec![2, 0],
        vec![2, 1],
    ];
    let h = Hierarchy::new(vec![0.5, 1.0], paths).unwrap();
    let w = WeightVector::new(vec![0.3, 0.0, 0.1, 0.25, 0.2, 0.15]).unwrap();
    let s = MeasureSample::new(w, OverlapModel::Hierarchical(h), (0..6).collect()).unwrap();
    for obs in observables() {
        let fast = ChainMasses::new(&s, obs.replicas()).unwrap().average(&obs).unwrap();
        let brute = gibbs_exact_observable(&s, &obs, DEFAULT_ENUMERATION_BUDGET).unwrap();
        assert!((fast - brute).abs() < 1e-14);
    }
}

#[test]
fn mc_agrees_with_exact_in_most_seeded_trials() {
    let s = sample_rpc(
        &RpcParams::new(vec![0.3, 0.7], vec![0.4, 1.0], 4).unwrap(),
        &mut RandomStream::root(17).rng(),
    )
    .unwrap();
    let f = OverlapFunction::new(FunctionId::PairProduct);
    let exact = gibbs_exact(&s, &f).unwrap();
    let trials = 200;
    let mut within = 0;
    for t in 0..trials {
        let est = gibbs_mc(&s, &f, 2000, &RandomStream::root(5).derive(t)).unwrap();
        if (est.mean - exact).abs() <= 4.0 * est.se {
            within += 1;
        }
    }
    assert!(within as f64 >= 0.99 * trials as f64, "{within}/{trials}");
}

#[test]
fn replica_symmetry_is_exact() {
    // R_{1,2} and R_{2,3} on three replicas: identical after support relabelling
    let s = sample_rpc(
        &RpcParams::new(vec![0.4, 0.8], vec![0.5, 1.0], 5).unwrap(),
        &mut RandomStream::root(2).rng(),
    )
    .unwrap();
    let a = Observable::from_factors(vec![pow(0, 1, 2)]).unwrap();
    let b = Observable::from_factors(vec![pow(1, 2, 2)]).unwrap();
    let va = ChainMasses::new(&s, 2).unwrap().average(&a).unwrap();
    let vb = ChainMasses::new(&s, 2).unwrap().average(&b).unwrap();
    assert_eq!(va, vb);
    let ea = gibbs_exact_observable(&s, &a, 1e8).unwrap();
    let eb = gibbs_exact_observable(&s, &b, 1e8).unwrap();
    assert_eq!(ea, eb);
}

fn permuted_control(weights: &[f64], gram: &[Vec<f64>], perm: &[usize]) -> MeasureSample {
    let w: Vec<f64> = perm.iter().map(|&i| weights[i]).collect();
    let g: Vec<Vec<f64>> = perm
        .iter()
        .map(|&i| perm.iter().map(|&j| gram[i][j]).collect())
        .collect();
    negative_control(&w, g).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_average_is_permutation_invariant(
        raw in proptest::collection::vec(0.01f64..1.0, 4),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let gram = vec![
            vec![1.0, 0.3, 0.1, 0.0],
            vec![0.3, 1.0, 0.2, 0.1],
            vec![0.1, 0.2, 1.0, 0.4],
            vec![0.0, 0.1, 0.4, 1.0],
        ];
        let base = permuted_control(&raw, &gram, &[0, 1, 2, 3]);
        let shuffled = permuted_control(&raw, &gram, &perm);
        for obs in observables().into_iter().take(4) {
            let a = gibbs_exact_observable(&base, &obs, 1e8).unwrap();
            let b = gibbs_exact_observable(&shuffled, &obs, 1e8).unwrap();
            prop_assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_one_is_one_for_any_measure(raw in proptest::collection::vec(0.0f64..1.0, 1..6)) {
        prop_assume!(raw.iter().sum::<f64>() > 0.0);
        let k = raw.len();
        let gram = (0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let s = negative_control(&raw, gram).unwrap();
        prop_assert_eq!(gibbs_exact(&s, &OverlapFunction::one()).unwrap(), 1.0);
    }
}
