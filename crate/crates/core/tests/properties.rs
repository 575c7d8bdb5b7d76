use std::collections::BTreeMap;
use std::fs;

use proptest::prelude::*;

use clion_core::diagnostics::{check_lemma1, check_lemma2, check_lemma_c1};
use clion_core::harness::{grid_search, record_trajectory, run, step_indices, write_grid, GridSpec, RunConfig};
use clion_core::optim::Method;
use clion_core::problems::{make_dataset, DataConfig, Generator, Problem, ProblemConfig, ProblemKind};
use clion_core::rng::index_at;
use clion_core::schedule;
use clion_core::stability::{twin_run, TwinRunSpec};
use clion_core::vecmath::{min_abs_nonzero, norm, NormKind};
use clion_core::{OptimizerConfig, ParamVector};

fn pair(max_d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max_d).prop_flat_map(|d| {
        let comp = prop_oneof![Just(0.0), -10.0..10.0f64, -1e-6..1e-6f64];
        (prop::collection::vec(comp.clone(), d), prop::collection::vec(comp, d))
    })
}

fn v(x: Vec<f64>) -> ParamVector {
    ParamVector::new(x).unwrap()
}

/// `‖sign a − sign b‖₂` counted by hand: each disagreeing coordinate
/// contributes 1 (one side zero) or 4 (opposite signs).
fn sign_gap(a: &[f64], b: &[f64]) -> f64 {
    let s = |x: f64| (x > 0.0) as i32 - (x < 0.0) as i32;
    a.iter().zip(b).map(|(&x, &y)| ((s(x) - s(y)) as f64).powi(2)).sum::<f64>().sqrt()
}

fn quadratic_run(method: Method, eta: f64) -> RunConfig {
    let mut opt = OptimizerConfig::new(method, eta);
    opt.lambda = 0.01;
    opt.nu = 0.01;
    RunConfig::new(
        ProblemConfig { kind: ProblemKind::Quadratic, classes: 2 },
        DataConfig { generator: Generator::QuadraticGauss, n: 30, dim: 5, seed: 4, test_multiplier: 2 },
        opt,
        150,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn sign_lipschitz_bound_holds((c, c2) in pair(40)) {
        let tau = [min_abs_nonzero(&v(c.clone())), min_abs_nonzero(&v(c2.clone()))]
            .into_iter()
            .flatten()
            .fold(f64::INFINITY, f64::min);
        prop_assume!(tau.is_finite());
        let check = check_lemma1(&v(c.clone()), &v(c2.clone()), tau).unwrap();
        prop_assert!(check.ok);
        prop_assert!((check.lhs - sign_gap(&c, &c2)).abs() < 1e-12);
    }

    #[test]
    fn pointwise_sign_correlation_holds((x, y) in pair(100)) {
        let check = check_lemma_c1(&v(x.clone()), &v(y.clone())).unwrap();
        let s = |t: f64| (t > 0.0) as i32 as f64 - (t < 0.0) as i32 as f64;
        let lhs: f64 = x.iter().zip(&y).map(|(&a, &b)| a * (s(a) - s(b))).sum();
        let dist = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!((check.lhs - lhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        prop_assert!((check.rhs - 2.0 * (x.len() as f64).sqrt() * dist).abs() <= 1e-9 * (1.0 + check.rhs));
        prop_assert!(check.ok);
    }

    #[test]
    fn index_draws_are_in_range_and_stable(seed in any::<u64>(), n in 1usize..1000, t in 1usize..500, b in 1usize..8) {
        let idx = step_indices(seed, n, t, b);
        prop_assert_eq!(idx.len(), b);
        for (j, &i) in idx.iter().enumerate() {
            prop_assert!(i < n);
            prop_assert_eq!(i, index_at(seed, n, ((t - 1) * b + j) as u64));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn clion_iterates_stay_bounded(
        d in 2usize..12,
        seed in 0u64..1000,
        log_eta in -3.0..-1.0f64,
        frac in 0.01..1.0f64,
        log_nu in -4.0..0.0f64,
    ) {
        let p = Problem::new(ProblemKind::Logistic, d, 2).unwrap();
        let ds = make_dataset(Generator::TwoCluster, seed, 40, d).unwrap();
        let g = ds.samples().iter().map(|s| s.x.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max);
        let g_hat = schedule::g_hat(g, d);
        let eta = 10f64.powf(log_eta);
        let steps = 200;
        let lambda = frac * schedule::lambda_cap(eta, g_hat, steps, 1.25);
        let cfg = OptimizerConfig::clion(eta, 0.9, 0.99, lambda, 10f64.powf(log_nu));
        let traj = record_trajectory(&p, &ds, &cfg, ParamVector::zeros(d), steps, 1, seed).unwrap();
        let report = check_lemma2(&traj, eta, lambda, g_hat, 1.25).unwrap();
        prop_assert!(report.preconditions_met);
        prop_assert_eq!(report.violations(), 0);
        for t in 1..=steps {
            prop_assert!(norm(traj.iterate(t), NormKind::L2) <= (t as f64 + 1.0) * eta * g_hat + 1e-12);
        }
    }

    #[test]
    fn twin_divergence_is_zero_until_first_visit(seed in 0u64..500, replace in 0usize..20) {
        let spec = TwinRunSpec {
            problem: ProblemConfig { kind: ProblemKind::Logistic, classes: 2 },
            data: DataConfig { generator: Generator::TwoCluster, n: 20, dim: 4, seed, test_multiplier: 1 },
            optimizer: OptimizerConfig::lion(0.01, 0.9, 0.99, 0.01),
            steps: 60,
            replace_index: replace,
            replacement_seed: seed + 1,
            index_seed: seed,
            init_seed: 0,
            init_scale: 0.0,
            batch_size: 1,
            schedule: Default::default(),
            allow_zero_lambda: false,
        };
        let report = twin_run(&spec).unwrap();
        let first = (1..=60).find(|&t| step_indices(seed, 20, t, 1)[0] == replace);
        let quiet_until = first.map_or(60, |t| t - 1);
        prop_assert!(report.divergence_curve[..=quiet_until].iter().all(|&x| x == 0.0));
        prop_assert_eq!(report.recursion_violations, 0);
        prop_assert_eq!(report.divergence_curve.len(), 61);
    }
}

#[test]
fn runs_are_reproducible() {
    for method in [Method::Sgd, Method::Sgdm, Method::Adam, Method::AdamW, Method::Lion, Method::RLion, Method::CLion] {
        let cfg = quadratic_run(method, 0.01);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.rows, b.rows, "{method:?}");
        assert_eq!(a.summary, b.summary, "{method:?}");
    }
}

#[test]
fn grid_files_do_not_depend_on_thread_count() {
    let spec = GridSpec {
        base: quadratic_run(Method::CLion, 0.01),
        axes: BTreeMap::from([
            ("optimizer.eta".to_string(), vec![0.001, 0.01, 0.1]),
            ("optimizer.nu".to_string(), vec![1e-3, 1e-1]),
        ]),
        metric: Default::default(),
        replicates: 3,
    };
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for threads in [Some(1), Some(3), None] {
        let dir = tmp.path().join(format!("{threads:?}"));
        let report = grid_search(&spec, threads).unwrap();
        let files = write_grid(&dir, &spec, &report).unwrap();
        outputs.push(files.iter().map(|f| fs::read(f).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[1], outputs[2]);
}
