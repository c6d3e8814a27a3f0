use lambda_core::datasets::{
    als_factorize, binarize, compress_time, parse_instances_jsonl, parse_ratings, prepare_movielens,
    synth_drift_stream, synth_ratings, write_instances_jsonl, write_ratings_csv, Entry, MovieLensOptions, SynthConfig,
    HOUR_MS,
};
use proptest::prelude::*;

#[test]
fn als_recovers_a_rank_one_matrix() {
    let a: Vec<f64> = (0..12).map(|u| 0.5 + (u as f64 * 0.37) % 1.5).collect();
    let b: Vec<f64> = (0..9).map(|i| 1.0 + (i as f64 * 0.61) % 2.0).collect();
    let entries: Vec<Entry> = (0..12).flat_map(|u| (0..9).map(move |i| (u, i, 0.0))).collect();
    let entries: Vec<Entry> = entries.into_iter().map(|(u, i, _)| (u, i, a[u] * b[i])).collect();
    let run = als_factorize(&entries, 12, 9, 1, 1e-9, 200, 3).unwrap();
    let sse: f64 = entries
        .iter()
        .map(|&(u, i, r)| (r - run.factors.user_row(u)[0] * run.factors.item_row(i)[0]).powi(2))
        .sum();
    let rmse = (sse / entries.len() as f64).sqrt();
    assert!(rmse <= 1e-3, "rmse {rmse}");
}

#[test]
fn als_objective_never_increases() {
    for seed in 0..20u64 {
        // every row and column observed at least once, plus random extras
        let mut entries: Vec<Entry> = (0..10)
            .map(|k| (k, (k * 3 + seed as usize) % 10, 1.0 + (k % 5) as f64))
            .collect();
        for k in 0..40u64 {
            let h = (seed * 1000 + k).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            entries.push((
                (h % 10) as usize,
                ((h >> 16) % 10) as usize,
                ((h >> 32) % 9) as f64 / 2.0 + 0.5,
            ));
        }
        let run = als_factorize(&entries, 10, 10, 3, 0.1, 15, seed).unwrap();
        for w in run.objectives.windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-12) + 1e-12,
                "seed {seed}: {} -> {}",
                w[0],
                w[1]
            );
        }
    }
}

/// Positives against the sum of truth probabilities in ten probability bins;
/// the statistic is close to chi-square with ten degrees of freedom.
fn calibration_statistic(probs: &[f64], labels: &[u8]) -> f64 {
    let mut obs = [0.0; 10];
    let mut exp = [0.0; 10];
    let mut var = [0.0; 10];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = ((p * 10.0) as usize).min(9);
        obs[b] += f64::from(y);
        exp[b] += p;
        var[b] += p * (1.0 - p);
    }
    (0..10)
        .filter(|&b| var[b] > 0.0)
        .map(|b| (obs[b] - exp[b]).powi(2) / var[b])
        .sum()
}

#[test]
fn synthetic_labels_follow_their_probabilities() {
    for seed in [1, 2, 3] {
        let s = synth_drift_stream(&SynthConfig {
            n_entities: 100,
            n_per_entity: 100,
            drift_magnitude: 0.0,
            seed,
            ..Default::default()
        })
        .unwrap();
        let probs: Vec<f64> = s.truth.iter().map(|t| t.probability).collect();
        let labels: Vec<u8> = s.instances.iter().map(|i| i.label).collect();
        // upper 0.1% point of chi-square(10)
        assert!(calibration_statistic(&probs, &labels) < 29.59);
    }
}

#[test]
fn without_drift_labels_before_and_after_the_midpoint_match() {
    let cfg = SynthConfig {
        n_entities: 100,
        n_per_entity: 100,
        drift_magnitude: 0.0,
        seed: 4,
        ..Default::default()
    };
    let s = synth_drift_stream(&cfg).unwrap();
    assert_eq!(s.instances.len(), 10_000);
    // 2x2 contingency table: (before, after) x (negative, positive)
    let mut t = [[0.0f64; 2]; 2];
    for i in &s.instances {
        t[usize::from(i.ts >= cfg.drift_ts())][usize::from(i.label)] += 1.0;
    }
    let n: f64 = t.iter().flatten().sum();
    let mut stat = 0.0;
    for (r, row) in t.iter().enumerate() {
        for c in 0..2 {
            let e = row.iter().sum::<f64>() * (t[0][c] + t[1][c]) / n;
            stat += (t[r][c] - e).powi(2) / e;
        }
    }
    // upper 1% point of chi-square(1)
    assert!(stat < 6.635, "chi-square {stat}");
}

#[test]
fn zero_weights_give_coin_flips() {
    let s = synth_drift_stream(&SynthConfig {
        n_entities: 50,
        n_per_entity: 200,
        fixed_scale: 0.0,
        entity_scale: 0.0,
        drift_magnitude: 0.0,
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    assert!(s.truth.iter().all(|t| t.probability == 0.5));
    let n = s.instances.len() as f64;
    let rate = s.instances.iter().filter(|i| i.label == 1).count() as f64 / n;
    assert!((rate - 0.5).abs() < 4.0 * (0.25 / n).sqrt(), "{rate}");
}

#[test]
fn drift_leaves_the_past_untouched() {
    let cfg = SynthConfig {
        n_entities: 20,
        n_per_entity: 50,
        drift_magnitude: 3.0,
        seed: 2,
        ..Default::default()
    };
    let s = synth_drift_stream(&cfg).unwrap();
    let calm = synth_drift_stream(&SynthConfig {
        drift_magnitude: 0.0,
        ..cfg.clone()
    })
    .unwrap();
    for ((a, b), inst) in s.truth.iter().zip(&calm.truth).zip(&s.instances) {
        if inst.ts < cfg.drift_ts() {
            assert_eq!(a.probability, b.probability);
        }
    }
    let moved = s
        .truth
        .iter()
        .zip(&calm.truth)
        .filter(|(a, b)| a.probability != b.probability)
        .count();
    assert!(moved > s.truth.len() / 3);
}

fn pipeline_bytes(seed: u64) -> (Vec<u8>, Vec<u8>) {
    let ratings = synth_ratings(40, 60, 1500, seed);
    let mut csv = Vec::new();
    write_ratings_csv(&ratings, &mut csv).unwrap();
    let parsed = parse_ratings(&csv[..], "mem").unwrap();
    assert_eq!(parsed, ratings);
    let opts = MovieLensOptions {
        rank: 5,
        als_iters: 4,
        seed,
        target_span_ms: 100 * HOUR_MS,
        ..Default::default()
    };
    let (instances, schema) = prepare_movielens(&parsed, &opts).unwrap();
    assert_eq!(schema.fixed_dim, 6);
    let mut jsonl = Vec::new();
    write_instances_jsonl(&instances, &mut jsonl).unwrap();
    let back = parse_instances_jsonl(&jsonl[..], "mem").unwrap();
    assert_eq!(back, instances);
    assert_eq!(instances.first().unwrap().ts, 0);
    assert_eq!(instances.last().unwrap().ts, 100 * HOUR_MS);
    (csv, jsonl)
}

#[test]
fn ratings_pipeline_is_byte_identical() {
    assert_eq!(pipeline_bytes(6), pipeline_bytes(6));
    assert_ne!(pipeline_bytes(6).1, pipeline_bytes(7).1);
}

#[test]
fn out_of_order_jsonl_is_rejected_with_its_line() {
    let s = synth_drift_stream(&SynthConfig {
        n_entities: 2,
        n_per_entity: 3,
        ..Default::default()
    })
    .unwrap();
    let mut jsonl = Vec::new();
    let mut rev = s.instances.clone();
    rev.reverse();
    write_instances_jsonl(&rev, &mut jsonl).unwrap();
    let err = parse_instances_jsonl(&jsonl[..], "x.jsonl").unwrap_err().to_string();
    assert!(err.contains("x.jsonl:2"), "{err}");
}

proptest! {
    #[test]
    fn compress_time_is_monotone_and_onto_the_span(
        t_min in -1_000_000_000i64..1_000_000_000,
        len in 1i64..1_000_000_000,
        a in 0.0f64..=1.0,
        b in 0.0f64..=1.0,
        span in 1i64..10_000_000_000,
    ) {
        let t_max = t_min + len;
        let ta = t_min + (a * len as f64) as i64;
        let tb = t_min + (b * len as f64) as i64;
        let ca = compress_time(ta, t_min, t_max, span).unwrap();
        let cb = compress_time(tb, t_min, t_max, span).unwrap();
        prop_assert!(ta > tb || ca <= cb);
        prop_assert_eq!(compress_time(t_min, t_min, t_max, span).unwrap(), 0);
        prop_assert_eq!(compress_time(t_max, t_min, t_max, span).unwrap(), span);
        prop_assert!((0..=span).contains(&ca));
    }

    #[test]
    fn binarize_is_monotone(a in 0.0f64..6.0, b in 0.0f64..6.0) {
        if a <= b {
            prop_assert!(binarize(a) <= binarize(b));
        }
    }
}
