use gginv_core::function::{FunctionId, FunctionSpec, OverlapFunction, BATTERY};
use gginv_core::gibbs::Budget;
use gginv_core::identity::{
    deletion_invariance_test, derivative_grid, gg_grid, gg_residual, invariance_grid, limit_consistency,
    ordered_weights_comparison, tilt_invariance_test, Decision, GGCheckSpec, Transform,
};
use gginv_core::measure::{standard_negative_control, SamplerSpec};
use gginv_core::rng::RandomStream;
use gginv_core::stats::{ks_two_sample, z_equality_test_at};
use gginv_core::transforms::{iterated_delete, single_shot_delete};
use gginv_core::Error;

fn r12() -> OverlapFunction {
    OverlapFunction::new(FunctionId::Monomial { p: 1 })
}

fn pd() -> SamplerSpec {
    SamplerSpec::pd(0.5, 4096).unwrap()
}

fn rpc() -> SamplerSpec {
    SamplerSpec::rpc(vec![0.25, 0.5], vec![0.5, 1.0], vec![8, 512]).unwrap()
}

fn control() -> SamplerSpec {
    SamplerSpec::fixed(standard_negative_control())
}

fn battery(sampler: &SamplerSpec) -> Vec<OverlapFunction> {
    BATTERY
        .iter()
        .map(|id| FunctionSpec::parse(id).unwrap().resolve(sampler.overlap_median()))
        .collect()
}

#[test]
fn constant_function_residual_is_exactly_zero() {
    let specs: Vec<GGCheckSpec> = [2, 3]
        .iter()
        .flat_map(|&n| (1..=3).map(move |p| GGCheckSpec::new(n, p, OverlapFunction::one()).unwrap()))
        .collect();
    for sampler in [pd(), rpc()] {
        for seed in 0..5 {
            let reports = gg_grid(&sampler, &specs, &Budget::new(8, 2), &RandomStream::root(seed), &Decision::default())
                .unwrap();
            for r in reports {
                assert_eq!(r.residual.mean, 0.0, "{r:?}");
                assert!((r.lhs.mean - r.rhs.mean).abs() <= 1e-15);
                assert!(r.pass);
            }
        }
    }
}

#[test]
fn battery_identities_hold_on_the_cascade() {
    let sampler = rpc();
    let mut specs = Vec::new();
    for f in battery(&sampler) {
        for n in [2, 3] {
            for p in 1..=3 {
                if f.arity() <= n {
                    specs.push(GGCheckSpec::new(n, p, f.clone()).unwrap());
                }
            }
        }
    }
    let reports = gg_grid(&sampler, &specs, &Budget::new(1500, 2), &RandomStream::root(31), &Decision::default()).unwrap();
    for r in &reports {
        assert!(r.pass, "{r:?}");
    }
}

#[test]
fn pairing_does_not_inflate_the_residual_error() {
    let sampler = rpc();
    for (f, n) in [(r12(), 2), (OverlapFunction::new(FunctionId::PairProduct), 3)] {
        let spec = GGCheckSpec::new(n, 2, f).unwrap();
        let r = gg_residual(&sampler, &spec, &Budget::new(500, 2), &RandomStream::root(3), &Decision::default()).unwrap();
        assert!(r.residual.se <= r.unpaired_se, "{r:?}");
    }
}

#[test]
fn negative_control_is_rejected_decisively() {
    let budget = Budget::new(20_000, 2);
    let spec = GGCheckSpec::new(2, 1, r12()).unwrap();
    let gg = gg_residual(&control(), &spec, &budget, &RandomStream::root(1), &Decision::default()).unwrap();
    assert!(gg.z.abs() > 5.0 && !gg.pass);
    let del = deletion_invariance_test(&control(), &r12(), 2, 1, &budget, &RandomStream::root(1), &Decision::default())
        .unwrap();
    assert!(del.z.abs() > 5.0 && !del.pass);
    assert!((del.difference.mean - 0.2133).abs() < 0.005, "{del:?}");
}

#[test]
fn one_level_tilt_and_deletion_invariance() {
    let sampler = SamplerSpec::rpc(vec![0.5], vec![1.0], vec![4096]).unwrap();
    let budget = Budget::new(4000, 2);
    let t = tilt_invariance_test(&sampler, &r12(), 2, 1.0, &budget, &RandomStream::root(5), &Decision::default()).unwrap();
    assert!(t.pass && t.z.abs() <= 3.0, "{t:?}");
    assert!((t.baseline.mean - 0.5).abs() <= 3.0 * t.baseline.se);
    let d = deletion_invariance_test(&sampler, &r12(), 2, 1, &budget, &RandomStream::root(5), &Decision::default())
        .unwrap();
    assert!(d.pass && d.z.abs() <= 3.0, "{d:?}");
    assert_eq!(d.retries, 0);
}

#[test]
fn grid_cells_match_single_checks() {
    let sampler = rpc();
    let budget = Budget::new(200, 2);
    let stream = RandomStream::root(8);
    let fs = battery(&sampler);
    let grid = invariance_grid(
        &sampler,
        &fs,
        &[2, 3],
        &[Transform::Tilt { t: 1.0 }, Transform::Delete { s: 2 }],
        &budget,
        &stream,
        &Decision::default(),
    )
    .unwrap();
    let single = tilt_invariance_test(&sampler, &fs[1], 2, 1.0, &budget, &stream, &Decision::default()).unwrap();
    let cell = grid
        .iter()
        .find(|r| r.kind == "tilt" && r.function == "r12" && r.n == 2)
        .unwrap();
    assert_eq!(cell.difference, single.difference);
    let single = deletion_invariance_test(&sampler, &fs[3], 3, 2, &budget, &stream, &Decision::default()).unwrap();
    let cell = grid
        .iter()
        .find(|r| r.kind == "delete" && r.function == "r12r13" && r.n == 3)
        .unwrap();
    assert_eq!(cell.difference, single.difference);
    // r12r13 needs three replicas, so it has no n = 2 cell
    assert!(!grid.iter().any(|r| r.function == "r12r13" && r.n == 2));
}

#[test]
fn double_deletion_agrees_with_single_shot() {
    let sampler = rpc();
    let reports = invariance_grid(
        &sampler,
        &[r12(), OverlapFunction::new(FunctionId::PairProduct)],
        &[3],
        &[Transform::Delete { s: 2 }, Transform::DeleteOnce { s: 2 }],
        &Budget::new(3000, 2),
        &RandomStream::root(13),
        &Decision::default(),
    )
    .unwrap();
    let (iterated, once) = reports.split_at(2);
    for (a, b) in iterated.iter().zip(once) {
        let z = z_equality_test_at(&a.transformed, &b.transformed, 3.0);
        assert!(z.verdict.pass, "{a:?} vs {b:?}");
    }
}

#[test]
fn iterated_and_single_shot_deletion_share_the_top_weight_law() {
    let sampler = pd();
    let n = 10_000u64;
    let top = |single: bool, seed: u64| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let stream = RandomStream::root(seed).derive(i);
                let s = sampler.sample(&stream.derive(0)).unwrap();
                let mut rng = stream.derive(1).rng();
                let d = if single {
                    single_shot_delete(&s, 3, &mut rng)
                } else {
                    iterated_delete(&s, 3, &mut rng)
                };
                d.unwrap().sample.weights().sorted()[0]
            })
            .collect()
    };
    let ks = ks_two_sample(&top(false, 40), &top(true, 41), 0.01).unwrap();
    assert!(ks.verdict.pass, "{ks:?}");
}

#[test]
fn derivatives_vanish_at_zero() {
    let sampler = rpc();
    for f in [OverlapFunction::one(), r12()] {
        let est = derivative_grid(&sampler, &f, 2, 3, &Budget::new(500, 400), &RandomStream::root(21), 3.0).unwrap();
        for e in est {
            assert!(e.verdict.pass, "{e:?}");
            assert!(e.max_abs <= e.bound);
        }
    }
}

#[test]
fn derivative_preconditions() {
    let err = derivative_grid(&rpc(), &r12(), 2, 0, &Budget::new(10, 10), &RandomStream::root(1), 3.0).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
    let err = derivative_grid(&rpc(), &r12(), 2, 7, &Budget::new(10, 10), &RandomStream::root(1), 3.0).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn large_tilt_reproduces_deletion() {
    let r = limit_consistency(&rpc(), &r12(), 2, 20.0, &Budget::new(300, 2), &RandomStream::root(4), &Decision::default())
        .unwrap();
    assert_eq!(r.envelope_violations, 0);
    assert!(r.max_gap <= 1e-6, "{r:?}");
    assert!(r.eligible_draws > 0);
}

#[test]
fn ordered_weights_on_cascade_and_control() {
    let r = ordered_weights_comparison(&rpc(), 3, 1, &Budget::new(3000, 2), 0.01, &RandomStream::root(17)).unwrap();
    assert_eq!(r.coordinates.len(), 6);
    assert!(r.pass, "{r:?}");
    let r = ordered_weights_comparison(&control(), 2, 1, &Budget::new(3000, 2), 0.01, &RandomStream::root(17)).unwrap();
    assert!(!r.pass);
}
