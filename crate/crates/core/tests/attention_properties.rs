//! Randomized invariants of the attention softmax and the two-way gate:
//! weights form a probability distribution, scores can be shifted without
//! changing the output, and gated states stay inside the segment between
//! their two inputs.

use kgqa_core::encoder::TokenProvider;
use kgqa_core::gnn::{attend_aggregate, gated_update, GnnConfig, GnnModel};
use kgqa_core::numerics::{Tape, Tensor};
use proptest::prelude::*;

/// One-hot messages turn the aggregation into an identity on the weights:
/// output coordinate i IS the attention weight of message i.
fn attention_weights(scores: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let k = scores.len();
    let score_nodes: Vec<_> = scores
        .iter()
        .map(|&s| tape.constant(Tensor::scalar(s)).unwrap())
        .collect();
    let message_nodes: Vec<_> = (0..k)
        .map(|i| {
            let mut v = vec![0.0; k];
            v[i] = 1.0;
            tape.constant(Tensor::vector(&v)).unwrap()
        })
        .collect();
    let out = attend_aggregate(&mut tape, &score_nodes, &message_nodes).unwrap();
    tape.value(out).values().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn attention_weights_form_a_distribution(
        scores in prop::collection::vec(-50.0f64..50.0, 1..8),
    ) {
        let weights = attention_weights(&scores);
        let sum: f64 = weights.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9, "weights sum to {sum}");
        for &w in &weights {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&w), "weight {w} out of range");
        }
    }

    #[test]
    fn attention_is_invariant_to_score_shifts(
        scores in prop::collection::vec(-50.0f64..50.0, 1..8),
        shift in -100.0f64..100.0,
    ) {
        let base = attention_weights(&scores);
        let shifted_scores: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let shifted = attention_weights(&shifted_scores);
        for (a, b) in base.iter().zip(&shifted) {
            prop_assert!((a - b).abs() < 1e-9, "shift moved a weight: {a} vs {b}");
        }
    }

    #[test]
    fn gated_state_lies_between_its_inputs(
        dim in 2usize..6,
        seed in 0u64..1000,
        scale_a in -3.0f64..3.0,
        scale_p in -3.0f64..3.0,
        scale_q in -2.0f64..2.0,
    ) {
        let provider = TokenProvider::trainable(["what".to_string()], dim);
        let config = GnnConfig {
            layers: 1,
            dim,
            epochs: 1,
            seed,
            ..GnnConfig::default()
        };
        let model = GnnModel::new(config, provider).unwrap();

        let mut tape = Tape::new();
        let fill = |tape: &mut Tape, scale: f64, phase: f64| {
            let v: Vec<f64> = (0..dim)
                .map(|i| scale * ((i as f64) * 0.7 + phase).sin())
                .collect();
            tape.constant(Tensor::vector(&v)).unwrap()
        };
        let agg = fill(&mut tape, scale_a, 0.3);
        let prev = fill(&mut tape, scale_p, 1.9);
        let q = fill(&mut tape, scale_q, 4.1);
        let out = gated_update(&mut tape, &model.store, &model.layers[0], agg, prev, q).unwrap();

        let ov = tape.value(out).values().to_vec();
        let av = tape.value(agg).values().to_vec();
        let pv = tape.value(prev).values().to_vec();
        for i in 0..dim {
            let lo = av[i].min(pv[i]) - 1e-9;
            let hi = av[i].max(pv[i]) + 1e-9;
            prop_assert!(
                (lo..=hi).contains(&ov[i]),
                "coordinate {i}: {} outside [{lo}, {hi}]",
                ov[i]
            );
        }
    }
}
