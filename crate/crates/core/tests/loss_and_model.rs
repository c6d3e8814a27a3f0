mod common;

use std::collections::BTreeMap;

use lambda_core::linalg;
use lambda_core::loss::{grad, hessian_contrib, logloss};
use lambda_core::ScoreSource;
use lambda_core::{
    CoefficientState, GameModel, HessianMode, HessianStore, Instance, LinearFixedEffect, OffsetInstance, ReAssignment,
    ReKey, Schema, SparseVector,
};
use proptest::prelude::*;

use common::{batch, naive_loss, vector};

#[test]
fn logloss_of_shifted_positive() {
    let b = [OffsetInstance::new(1.0, SparseVector::from_pairs([(0, 1.0)]), 1).unwrap()];
    let oracle = -(1.0 / (1.0 + (-2.0f64).exp())).ln();
    assert!((logloss(&b, &[1.0]).unwrap() - oracle).abs() < 1e-15);
    assert!((oracle - 0.1269280).abs() < 1e-7);
}

#[test]
fn doubled_instance_doubles_curvature() {
    let one = OffsetInstance::new(0.2, SparseVector::from_dense(&[1.0, -0.5, 2.0]), 1).unwrap();
    let beta = [0.3, 0.1, -0.2];
    let single = hessian_contrib(std::slice::from_ref(&one), &beta, HessianMode::Full).unwrap();
    let double = hessian_contrib(&[one.clone(), one], &beta, HessianMode::Full).unwrap();
    for (a, b) in single.raw().iter().zip(double.raw()) {
        assert_eq!(2.0 * a, *b);
    }
}

fn two_type_model() -> (GameModel, Instance) {
    let schema = Schema::new(2).with_re_type("user", 2).with_re_type("item", 1);
    let mut model = GameModel::zeros(schema, HessianMode::Full);
    model.fixed = LinearFixedEffect {
        coeffs: vec![0.5, -1.0],
    };
    let mut user = CoefficientState::prior(2, HessianMode::Full, 1.0);
    user.mean = vec![2.0, 0.25];
    let mut item = CoefficientState::prior(1, HessianMode::Full, 1.0);
    item.mean = vec![-3.0];
    model.random_effects.insert(ReKey::new("user", "u"), user);
    model.random_effects.insert(ReKey::new("item", "i"), item);
    let inst = Instance::new(
        0,
        1,
        SparseVector::from_dense(&[1.0, 0.5]),
        vec![
            ReAssignment::new("user", "u", SparseVector::from_dense(&[0.5, 4.0])),
            ReAssignment::new("item", "i", SparseVector::from_dense(&[0.1])),
        ],
    )
    .unwrap();
    (model, inst)
}

#[test]
fn score_is_fixed_plus_each_type() {
    let (model, inst) = two_type_model();
    // 0.5 - 0.5 = 0; user 1.0 + 1.0 = 2.0; item -0.3
    let fixed = model.fixed_score(&inst.fixed_features).unwrap();
    let parts: Vec<f64> = inst.re_assignments.iter().map(|a| model.re_score(a).unwrap()).collect();
    assert_eq!(fixed, 0.0);
    assert_eq!(parts, vec![2.0, -0.30000000000000004]);
    assert!((model.score(&inst).unwrap() - 1.7).abs() < 1e-15);
}

#[test]
fn unseen_entity_scores_fixed_effect_only() {
    let (model, mut inst) = two_type_model();
    inst.re_assignments[0].re_id = "never-seen".into();
    inst.re_assignments.truncate(1);
    assert_eq!(
        model.score(&inst).unwrap(),
        model.fixed_score(&inst.fixed_features).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gradient_matches_central_differences(d in 1usize..=8, seed_batch in batch(8, 30), beta in vector(8, 2.0)) {
        let b: Vec<OffsetInstance> = seed_batch
            .into_iter()
            .map(|inst| {
                let z: Vec<(usize, f64)> = inst.features.iter().filter(|&(i, _)| i < d).collect();
                OffsetInstance::new(inst.offset, SparseVector::from_pairs(z), inst.label).unwrap()
            })
            .collect();
        let beta = &beta[..d];
        let g = grad(&b, beta).unwrap();
        let h = 1e-5;
        let fd: Vec<f64> = (0..d)
            .map(|i| {
                let mut up = beta.to_vec();
                let mut down = beta.to_vec();
                up[i] += h;
                down[i] -= h;
                (logloss(&b, &up).unwrap() - logloss(&b, &down).unwrap()) / (2.0 * h)
            })
            .collect();
        let err: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
        prop_assert!(linalg::norm(&err) <= 1e-6 * linalg::norm(&fd).max(1.0));
    }

    #[test]
    fn curvature_is_symmetric_psd_and_diagonal_mode_agrees(b in batch(5, 25), beta in vector(5, 3.0)) {
        let full = hessian_contrib(&b, &beta, HessianMode::Full).unwrap();
        let diag = hessian_contrib(&b, &beta, HessianMode::Diagonal).unwrap();
        let a = full.to_dense();
        for i in 0..5 {
            for j in 0..5 {
                prop_assert_eq!(a[i * 5 + j], a[j * 5 + i]);
            }
            prop_assert_eq!(diag.get(i, i), full.get(i, i));
        }
        let min = linalg::symmetric_eigenvalues(&a, 5).into_iter().fold(f64::INFINITY, f64::min);
        prop_assert!(min >= -1e-8 * full.trace().max(1e-300));
    }

    #[test]
    fn logloss_is_convex_on_segments(b in batch(4, 20), b1 in vector(4, 5.0), b2 in vector(4, 5.0), alpha in 0.0f64..1.0) {
        let mid: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect();
        let lhs = logloss(&b, &mid).unwrap();
        let rhs = alpha * logloss(&b, &b1).unwrap() + (1.0 - alpha) * logloss(&b, &b2).unwrap();
        prop_assert!(lhs <= rhs + 1e-10);
    }

    #[test]
    fn logloss_matches_naive_formula_in_the_safe_range(b in batch(3, 10), beta in vector(3, 1.0)) {
        let naive: f64 = b.iter().map(|i| naive_loss(i.offset + i.features.dot(&beta).unwrap(), i.label)).sum();
        prop_assert!((logloss(&b, &beta).unwrap() - naive).abs() <= 1e-12 * naive.max(1.0));
    }

    #[test]
    fn sparse_vectors_are_canonical(pairs in prop::collection::vec((0usize..12, prop_oneof![Just(0.0), -4.0f64..4.0]), 0..30)) {
        let v = SparseVector::from_pairs(pairs.clone());
        let e = v.entries();
        prop_assert!(e.windows(2).all(|w| w[0].0 < w[1].0));
        prop_assert!(e.iter().all(|&(_, x)| x != 0.0));
        // values summed per index (in sorted input order, so exactly reproducible)
        let mut sorted = pairs.clone();
        sorted.sort_by_key(|p| p.0);
        let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
        for (i, x) in &sorted {
            *sums.entry(*i).or_default() += x;
        }
        let expected: Vec<(usize, f64)> = sums.into_iter().filter(|&(_, x)| x != 0.0).collect();
        prop_assert_eq!(e, &expected[..]);
    }

    #[test]
    fn dot_ignores_input_order(pairs in prop::collection::vec((0usize..6, -4.0f64..4.0), 0..10), w in vector(6, 3.0), rot in 0usize..10) {
        let mut shuffled = pairs.clone();
        if !shuffled.is_empty() {
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
        }
        // distinct indices only, so summation order cannot matter
        let mut seen = std::collections::BTreeSet::new();
        let distinct: Vec<(usize, f64)> = pairs.iter().copied().filter(|p| seen.insert(p.0)).collect();
        let mut seen = std::collections::BTreeSet::new();
        let distinct_shuffled: Vec<(usize, f64)> = shuffled.iter().copied().filter(|p| distinct.contains(p) && seen.insert(p.0)).collect();
        let a = SparseVector::from_pairs(distinct.clone()).dot(&w).unwrap();
        let b = SparseVector::from_pairs(distinct_shuffled).dot(&w).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn coefficient_state_round_trips_bit_exactly(
        mean in vector(3, 1e6),
        raw in vector(9, 1e3),
        lambda in 1e-6f64..1e6,
        version in any::<u32>(),
        diagonal in any::<bool>(),
    ) {
        // symmetric PSD by construction: A^T A
        let mut a = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                a[i * 3 + j] = (0..3).map(|k| raw[k * 3 + i] * raw[k * 3 + j]).sum();
            }
        }
        let hessian = if diagonal {
            HessianStore::Diagonal(vec![a[0], a[4], a[8]])
        } else {
            HessianStore::full_from_dense(&a, 3)
        };
        let state = CoefficientState { mean, hessian, lambda, version: u64::from(version), last_update_ts: -5 };
        let json = serde_json::to_string(&state).unwrap();
        let back: CoefficientState = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, state);
    }
}
