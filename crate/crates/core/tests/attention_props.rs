//! Algebraic invariants of attention pooling.

mod common;

use common::{attention_trial, AlgebraStats};
use proptest::prelude::*;
use refocus_core::attention::{pool, sum_prefix, AttentionParams};
use refocus_core::{Rng, Tensor};

fn states(t: usize, d: usize) -> impl Strategy<Value = Vec<Tensor>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), t)
        .prop_map(|rows| rows.into_iter().map(Tensor::vector).collect())
}

fn case() -> impl Strategy<Value = (Vec<Tensor>, Vec<f64>)> {
    (1usize..10, 1usize..6).prop_flat_map(|(t, d)| (states(t, d), prop::collection::vec(-40.0f64..40.0, t)))
}

proptest! {
    #[test]
    fn alphas_form_a_distribution((h, scores) in case()) {
        let out = pool(&scores, &h).unwrap();
        prop_assert!((out.alphas.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(out.alphas.iter().all(|&a| (0.0..=1.0).contains(&a)));
    }

    #[test]
    fn aggregate_lies_in_the_hull((h, scores) in case()) {
        let out = pool(&scores, &h).unwrap();
        for j in 0..h[0].len() {
            let lo = h.iter().map(|v| v.data()[j]).fold(f64::INFINITY, f64::min);
            let hi = h.iter().map(|v| v.data()[j]).fold(f64::NEG_INFINITY, f64::max);
            let v = out.aggregate.data()[j];
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn shifting_scores_changes_nothing((h, scores) in case(), c in -100.0f64..100.0) {
        let a = pool(&scores, &h).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        let b = pool(&shifted, &h).unwrap();
        for (x, y) in a.alphas.iter().zip(&b.alphas) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn identical_states_pass_through(t in 1usize..10, v in prop::collection::vec(-5.0f64..5.0, 1..6), seed in 0u64..1000) {
        let h = vec![Tensor::vector(v.clone()); t];
        let params = AttentionParams::init(t, v.len(), false, &mut Rng::new(seed)).unwrap();
        let (out, _) = params.attend(&h).unwrap();
        for (a, b) in out.aggregate.data().iter().zip(&v) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn full_prefix_is_t_times_uniform_pool((h, _) in case()) {
        let t = h.len();
        let s = sum_prefix(&h, t).unwrap();
        let m = pool(&vec![0.0; t], &h).unwrap();
        for (a, b) in s.data().iter().zip(m.aggregate.data()) {
            prop_assert!((a - t as f64 * b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }
}

#[test]
fn randomized_algebra_trials() {
    let mut rng = Rng::new(5);
    let mut stats = AlgebraStats::default();
    for _ in 0..1000 {
        attention_trial(&mut rng, &mut stats);
    }
    assert_eq!(stats.mean_mismatch, 0);
    assert_eq!(stats.hull_violations, 0);
    assert!(stats.worst_alpha_sum <= 1e-12, "{}", stats.worst_alpha_sum);
}
