// SPDX-License-Identifier: MIT OR Apache-2.0

use nkb_core::factworld::{mask_span, Category, Span};
use nkb_core::model::{ffn_forward, ffn_memory_forward, FfnParams};
use nkb_core::probes::{project_value, top_triggering, TriggerMatrix};
use nkb_core::rng::rng_for;
use nkb_core::tensor::Tensor;
use nkb_core::Activation;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn triggers() -> impl Strategy<Value = TriggerMatrix> {
    (1usize..30, 1usize..6).prop_flat_map(|(q, s)| {
        // Small integers force ties.
        prop::collection::vec(prop::collection::vec(0u8..4, s), q).prop_map(|rows| TriggerMatrix {
            fact_ids: (0..rows.len()).collect(),
            weights: rows.iter().map(|r| r.iter().map(|&x| f64::from(x)).collect()).collect(),
            inputs: vec![Vec::new(); rows.len()],
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ffn_views_agree(
        (h, w1, w2) in (1usize..9, 1usize..5)
            .prop_flat_map(|(d, len)| (matrix(len, d, 3.0), matrix(4 * d, d, 1.0), matrix(4 * d, d, 1.0))),
        gelu: bool,
    ) {
        let act = if gelu { Activation::Gelu } else { Activation::Relu };
        let (len, d) = (h.rows(), h.cols());
        let p = FfnParams { w1, w2 };
        let out = ffn_forward(&h, &p, act).unwrap();
        for t in 0..len {
            let (slots, weights) = ffn_memory_forward(h.row(t), &p, act).unwrap();
            prop_assert_eq!(weights.len(), 4 * d);
            for (a, b) in out.row(t).iter().zip(&slots) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn projections_are_distributions(e in matrix(20, 6, 30.0), v in prop::collection::vec(-30.0f64..30.0, 6)) {
        let p = project_value(&v, &e).unwrap();
        prop_assert_eq!(p.len(), 20);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn top_triggering_matches_full_sort(t in triggers(), m in 0usize..40) {
        for key in 0..t.slots() {
            let col = t.column(key);
            let mut order: Vec<usize> = (0..col.len()).collect();
            order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
            order.truncate(m);
            let r = top_triggering(&t, key, m).unwrap();
            let got: Vec<usize> = r.triggers.iter().map(|x| x.question).collect();
            prop_assert_eq!(got, order);
            prop_assert_eq!(r.truncated, m > t.questions());
        }
    }

    #[test]
    fn shuffling_keeps_each_column(t in triggers(), seed: u64) {
        let s = t.column_shuffled(seed);
        for key in 0..t.slots() {
            let (mut a, mut b) = (t.column(key), s.column(key));
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn masked_span_restores(tokens in prop::collection::vec(0u32..50, 1..12), a in 0usize..12, b in 1usize..4, seed: u64) {
        let start = a % tokens.len();
        let len = b.min(tokens.len() - start);
        let span = Span { start, len, category: Category::Other };
        let (input, target, got) = mask_span(&tokens, &[span], u32::MAX, &mut rng_for(seed, "mask")).unwrap();
        prop_assert_eq!(got, span);
        prop_assert_eq!(input.len(), tokens.len() - len + 1);
        let mut restored = input[..start].to_vec();
        restored.extend_from_slice(&target[1..]);
        restored.extend_from_slice(&input[start + 1..]);
        prop_assert_eq!(restored, tokens);
    }

    #[test]
    fn transpose_is_an_involution(t in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| matrix(r, c, 5.0))) {
        prop_assert_eq!(t.transpose().unwrap().transpose().unwrap(), t);
    }
}
