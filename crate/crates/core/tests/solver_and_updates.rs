mod common;

use lambda_core::batch::{per_entity_solve, train_batch_report, EntityProblem};
use lambda_core::datasets::{synth_drift_stream, SynthConfig, HOUR_MS};
use lambda_core::linalg;
use lambda_core::loss::{hessian_contrib, sigmoid};
use lambda_core::sampler::{covariance_factor, sampled_score, thompson_sample};
use lambda_core::{
    incremental_update, posterior_covariance, CoefficientState, GameModel, HessianMode, HessianStore, Instance,
    LinearFixedEffect, OffsetInstance, ReAssignment, ReKey, Schema, SparseVector, TrainerConfig,
};
use proptest::prelude::*;

use common::{batch, max_abs_diff, vector};

fn config(delta: f64) -> TrainerConfig {
    TrainerConfig {
        delta,
        ..Default::default()
    }
}

/// `H + lambda I` as a dense matrix.
fn precision(state: &CoefficientState) -> Vec<f64> {
    let d = state.dim();
    let mut a = state.hessian.to_dense();
    for i in 0..d {
        a[i * d + i] += state.lambda;
    }
    a
}

/// Gradient of `(w/2)||b - m||^2_P + sum logloss + (lambda/2)||b||^2`, written out
/// from the per-instance derivative `(sigma(s) - y) z`.
fn objective_gradient(b: &[OffsetInstance], m: &[f64], p: &[f64], w: f64, lambda: f64, beta: &[f64]) -> Vec<f64> {
    let d = beta.len();
    let diff: Vec<f64> = beta.iter().zip(m).map(|(x, y)| x - y).collect();
    let mut g: Vec<f64> = (0..d)
        .map(|i| w * (0..d).map(|j| p[i * d + j] * diff[j]).sum::<f64>() + lambda * beta[i])
        .collect();
    for inst in b {
        let s = inst.offset + inst.features.iter().map(|(i, v)| v * beta[i]).sum::<f64>();
        let r = sigmoid(s) - f64::from(inst.label);
        for (i, v) in inst.features.iter() {
            g[i] += r * v;
        }
    }
    g
}

fn one_hot_batch(n: usize, d: usize, seed: u64) -> Vec<OffsetInstance> {
    (0..n)
        .map(|k| {
            let h = (k as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ seed;
            let idx = (h % d as u64) as usize;
            let offset = ((h >> 8) % 200) as f64 / 100.0 - 1.0;
            OffsetInstance::new(
                offset,
                SparseVector::from_pairs([(idx, 1.0)]),
                u8::from((h >> 20).is_multiple_of(3)),
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn full_and_diagonal_agree_on_one_hot_features() {
    for seed in 0..10 {
        let b = one_hot_batch(60, 5, seed);
        let state_f = CoefficientState::prior(5, HessianMode::Full, 1.0);
        let state_d = CoefficientState::prior(5, HessianMode::Diagonal, 1.0);
        let cfg = config(0.9);
        let full = incremental_update(&state_f, &b, &cfg).unwrap();
        let diag = incremental_update(&state_d, &b, &cfg).unwrap();
        assert!(max_abs_diff(full.new_mean(), diag.new_mean()) <= 1e-5);
        let second = one_hot_batch(40, 5, seed + 100);
        let full2 = incremental_update(&full.state, &second, &cfg).unwrap();
        let diag2 = incremental_update(&diag.state, &second, &cfg).unwrap();
        assert!(max_abs_diff(full2.new_mean(), diag2.new_mean()) <= 1e-5);
    }
}

#[test]
fn backfitting_objective_never_increases() {
    for seed in 0..4 {
        let s = synth_drift_stream(&SynthConfig {
            n_entities: 15,
            n_per_entity: 40,
            dim: 3,
            span_ms: 10 * HOUR_MS,
            seed,
            ..Default::default()
        })
        .unwrap();
        let report = train_batch_report(&s.instances, &s.schema, &TrainerConfig::default(), 5).unwrap();
        let mut prev = report.initial_objective;
        for &obj in &report.round_objectives {
            assert!(obj <= prev + 1e-9 * prev.abs(), "{obj} after {prev}");
            prev = obj;
        }
    }
}

#[test]
fn unseen_entity_variance_is_larger_and_no_effects_means_point_score() {
    let schema = Schema::new(1).with_re_type("user", 2);
    let mut model = GameModel::zeros(schema, HessianMode::Full);
    model.fixed = LinearFixedEffect { coeffs: vec![0.7] };
    let cfg = TrainerConfig::default();
    let mut seen = CoefficientState::prior(2, HessianMode::Full, 1.0);
    seen.hessian = HessianStore::full_from_dense(&[20.0, 3.0, 3.0, 15.0], 2);
    model.random_effects.insert(ReKey::new("user", "a"), seen);
    let inst = |id: &str| {
        Instance::new(
            0,
            1,
            SparseVector::from_dense(&[1.0]),
            vec![ReAssignment::new("user", id, SparseVector::from_dense(&[1.0, 1.0]))],
        )
        .unwrap()
    };
    let variance = |id: &str| {
        let xs: Vec<f64> = (0..20_000)
            .map(|s| sampled_score(&model, &inst(id), &cfg, s).unwrap())
            .collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
    };
    assert!(variance("cold") > 5.0 * variance("a"));

    let bare = Instance::new(0, 1, SparseVector::from_dense(&[2.0]), vec![]).unwrap();
    for s in 0..10 {
        assert_eq!(
            sampled_score(&model, &bare, &cfg, s).unwrap(),
            model.score(&bare).unwrap()
        );
    }
}

#[test]
fn thompson_draws_match_posterior_moments() {
    let mut st = CoefficientState::prior(2, HessianMode::Full, 0.5);
    st.mean = vec![1.5, -0.5];
    st.hessian = HessianStore::full_from_dense(&[2.0, 0.8, 0.8, 1.0], 2);
    // Sigma = inverse of [[2.5, 0.8], [0.8, 1.5]]
    let det = 2.5 * 1.5 - 0.8 * 0.8;
    let sigma = [1.5 / det, -0.8 / det, -0.8 / det, 2.5 / det];
    let n = 100_000;
    let draws: Vec<Vec<f64>> = (0..n).map(|s| thompson_sample(&st, s).unwrap()).collect();
    let mean: Vec<f64> = (0..2)
        .map(|i| draws.iter().map(|d| d[i]).sum::<f64>() / n as f64)
        .collect();
    for i in 0..2 {
        let se = (sigma[i * 2 + i] / n as f64).sqrt();
        assert!((mean[i] - st.mean[i]).abs() < 4.0 * se, "mean {i}: {}", mean[i]);
        for j in 0..2 {
            let c = draws.iter().map(|d| (d[i] - mean[i]) * (d[j] - mean[j])).sum::<f64>() / (n - 1) as f64;
            assert!(
                (c - sigma[i * 2 + j]).abs() < 0.02 * sigma[i * 2 + i],
                "cov {i}{j}: {c}"
            );
        }
    }
}

#[test]
fn diagonal_sample_moments() {
    let mut st = CoefficientState::prior(2, HessianMode::Full, 1.0);
    st.mean = vec![1.0, -1.0];
    st.hessian = HessianStore::full_from_dense(&[3.0, 0.0, 0.0, 3.0], 2);
    let n = 100_000;
    let draws: Vec<Vec<f64>> = (0..n).map(|s| thompson_sample(&st, s).unwrap()).collect();
    for i in 0..2 {
        let m = draws.iter().map(|d| d[i]).sum::<f64>() / n as f64;
        let v = draws.iter().map(|d| (d[i] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((m - st.mean[i]).abs() < 0.02, "mean {m}");
        assert!((v / 0.25 - 1.0).abs() < 0.05, "variance {v}");
    }
}

#[test]
fn new_entity_score_variance_is_the_quadratic_form() {
    let schema = Schema::new(1).with_re_type("user", 3);
    let model = GameModel::zeros(schema, HessianMode::Full);
    let cfg = TrainerConfig {
        lambda: 2.0,
        ..Default::default()
    };
    let z = [1.0, -2.0, 0.5];
    let inst = Instance::new(
        0,
        0,
        SparseVector::new(),
        vec![ReAssignment::new("user", "new", SparseVector::from_dense(&z))],
    )
    .unwrap();
    let n = 40_000;
    let xs: Vec<f64> = (0..n).map(|s| sampled_score(&model, &inst, &cfg, s).unwrap()).collect();
    let m = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    let expected = linalg::dot(&z, &z) / 2.0;
    assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solver_reaches_tolerance_from_any_start(b in batch(4, 30), m in vector(4, 2.0), start in vector(4, 5.0), w in 0.0f64..1.0) {
        let prior = hessian_contrib(&b, &m, HessianMode::Full).unwrap();
        let problem = EntityProblem { batch: &b, prior_mean: &m, prior_hessian: &prior, prior_weight: w, lambda: 0.7 };
        let cfg = TrainerConfig::default();
        let a = per_entity_solve(&problem, &cfg, None).unwrap();
        let c = per_entity_solve(&problem, &cfg, Some(&start)).unwrap();
        prop_assert!(a.grad_norm <= cfg.solver_tol);
        prop_assert!(c.grad_norm <= cfg.solver_tol);
        // strongly convex with modulus >= lambda, so ||a - c|| <= 2 tol / lambda
        let diff: Vec<f64> = a.mean.iter().zip(&c.mean).map(|(x, y)| x - y).collect();
        prop_assert!(linalg::norm(&diff) <= 10.0 * cfg.solver_tol);
        let g = objective_gradient(&b, &m, &prior.to_dense(), w, 0.7, &a.mean);
        prop_assert!(linalg::norm(&g) <= 1e-7);
    }

    #[test]
    fn repeated_batch_with_no_forgetting_is_stationary_for_the_written_objective(b in batch(3, 15)) {
        let cfg = config(1.0);
        let prior = CoefficientState::prior(3, HessianMode::Full, 1.0);
        let first = incremental_update(&prior, &b, &cfg).unwrap();
        let zero = vec![0.0; 9];
        let g1 = objective_gradient(&b, &[0.0; 3], &zero, 1.0, 1.0, first.new_mean());
        prop_assert!(linalg::norm(&g1) <= 1e-7);
        let h1 = hessian_contrib(&b, first.new_mean(), HessianMode::Full).unwrap();
        prop_assert!(first.new_hessian().max_abs_diff(&h1) <= 1e-12);

        let second = incremental_update(&first.state, &b, &cfg).unwrap();
        let g2 = objective_gradient(&b, first.new_mean(), &h1.to_dense(), 1.0, 1.0, second.new_mean());
        prop_assert!(linalg::norm(&g2) <= 1e-7);
        let mut h2 = h1.clone();
        h2.add_assign(&hessian_contrib(&b, second.new_mean(), HessianMode::Full).unwrap()).unwrap();
        prop_assert!(second.new_hessian().max_abs_diff(&h2) <= 1e-10 * h2.trace().max(1.0));
    }

    #[test]
    fn updates_keep_the_hessian_psd(batches in prop::collection::vec(batch(4, 10), 1..8), delta in 0.05f64..=1.0) {
        let cfg = config(delta);
        let mut st = CoefficientState::prior(4, HessianMode::Full, 1.0);
        for b in &batches {
            st = incremental_update(&st, b, &cfg).unwrap().state;
            let eig = linalg::symmetric_eigenvalues(&st.hessian.to_dense(), 4);
            let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!(min >= -1e-9 * st.hessian.trace().max(1.0));
        }
    }

    #[test]
    fn empty_updates_never_shrink_variance(b in batch(3, 20), delta in 0.05f64..=1.0, steps in 1usize..6) {
        let cfg = config(delta);
        let mut st = incremental_update(&CoefficientState::prior(3, HessianMode::Full, 1.0), &b, &cfg).unwrap().state;
        let mut prev = posterior_covariance(&st).unwrap().variances();
        for _ in 0..steps {
            st = incremental_update(&st, &[], &cfg).unwrap().state;
            let var = posterior_covariance(&st).unwrap().variances();
            for (v, p) in var.iter().zip(&prev) {
                prop_assert!(*v >= p * (1.0 - 1e-12));
            }
            prev = var;
        }
    }

    #[test]
    fn covariance_inverts_the_precision(b in batch(4, 25), lambda in 0.01f64..10.0) {
        let mut st = CoefficientState::prior(4, HessianMode::Full, lambda);
        st.hessian = hessian_contrib(&b, &[0.3, -0.1, 0.0, 0.2], HessianMode::Full).unwrap();
        let sigma = posterior_covariance(&st).unwrap().to_dense();
        let prod = linalg::matmul(&sigma, &precision(&st), 4);
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { 1.0 } else { 0.0 };
                prop_assert!((prod[i * 4 + j] - e).abs() <= 1e-8);
            }
        }
        let f = covariance_factor(&st).unwrap();
        prop_assert!(max_abs_diff(&f.reconstruct(), &sigma) <= 1e-10 * sigma.iter().fold(1.0f64, |a, b| a.max(b.abs())));
    }
}
