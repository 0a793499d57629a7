// SPDX-License-Identifier: MIT OR Apache-2.0

use nkb_core::factworld::{build_vocab, generate_world, render_qa, Partition, Vocab, World, WorldConfig};
use nkb_core::model::{ModelConfig, NkbInit, Seq2SeqModel};
use nkb_core::probes::{
    build_trigger_matrix, project_value, top_scoring_report, top_triggering, TriggerMatrix,
};
use nkb_core::rng::rng_for;
use nkb_core::surgery::{apply_surgery, changed_rows, select_target_slot, SurgeryOp};
use nkb_core::tape::Activation;
use nkb_core::training::QA_PROMPT;
use rand::Rng;

fn small_world() -> (World, Vocab) {
    let cfg = WorldConfig {
        seed: 3,
        entities_per_category: 12,
        n_relations: 6,
        n_base_facts: 40,
        n_new_facts: 10,
        n_withheld_facts: 5,
    };
    let world = generate_world(&cfg).unwrap();
    let vocab = build_vocab(&world);
    (world, vocab)
}

fn mounted(vocab_size: usize, seed: u64, activation: Activation) -> Seq2SeqModel<f64> {
    let mut cfg = ModelConfig::desk(vocab_size);
    cfg.model_dim = 16;
    cfg.num_heads = 2;
    cfg.init_std = 0.2;
    cfg.activation = activation;
    let site = cfg.nkb_site;
    let mut rng = rng_for(seed, "model");
    let mut m = Seq2SeqModel::new(cfg, &mut rng).unwrap();
    let init = NkbInit {
        key_std: 0.5,
        value_std: 0.2,
    };
    m.mount_nkb(site, 12, init, &mut rng).unwrap();
    m
}

fn matrix(seed: u64, activation: Activation) -> (World, Vocab, Seq2SeqModel<f64>, TriggerMatrix) {
    let (world, vocab) = small_world();
    let model = mounted(vocab.len(), seed, activation);
    let pairs = render_qa(&world, Partition::Base);
    let m = build_trigger_matrix(&model, &vocab, &pairs, 2).unwrap();
    (world, vocab, model, m)
}

#[test]
fn recorded_weights_match_recomputation_from_recorded_inputs() {
    for (seed, act) in [(0, Activation::Relu), (1, Activation::Gelu)] {
        let (_, _, model, m) = matrix(seed, act);
        let bank = model.nkb().unwrap();
        for (w, h) in m.weights.iter().zip(&m.inputs) {
            for (i, &wi) in w.iter().enumerate() {
                let s: f64 = h.iter().zip(bank.key(i)).map(|(a, b)| a * b).sum();
                let expected = act.apply(s);
                assert!((wi - expected).abs() <= 1e-12, "slot {i}: {wi} vs {expected}");
            }
        }
    }
}

#[test]
fn trigger_rows_are_the_first_answer_position() {
    let (world, vocab) = small_world();
    let model = mounted(vocab.len(), 2, Activation::Relu);
    let pairs = render_qa(&world, Partition::Base);
    let m = build_trigger_matrix(&model, &vocab, &pairs[..5], 1).unwrap();
    for (row, p) in m.weights.iter().zip(&pairs) {
        let src = vocab.encode(&p.question).unwrap();
        let d = model.greedy_decode_prompted(&[src], &QA_PROMPT, 4).unwrap().pop().unwrap();
        assert_eq!(row, &d.trace.weights[0]);
    }
}

#[test]
fn trigger_matrix_is_thread_count_invariant() {
    let (world, vocab) = small_world();
    let model = mounted(vocab.len(), 4, Activation::Relu);
    let pairs = render_qa(&world, Partition::Base);
    let a = build_trigger_matrix(&model, &vocab, &pairs, 1).unwrap();
    let b = build_trigger_matrix(&model, &vocab, &pairs, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unmounted_model_is_refused() {
    let (world, vocab) = small_world();
    let model = Seq2SeqModel::<f64>::new(ModelConfig::desk(vocab.len()), &mut rng_for(0, "m")).unwrap();
    let pairs = render_qa(&world, Partition::Base);
    assert!(build_trigger_matrix(&model, &vocab, &pairs, 1).is_err());
}

#[test]
fn projected_distributions_sum_to_one() {
    let (world, vocab, model, _) = matrix(5, Activation::Relu);
    let bank = model.nkb().unwrap();
    for i in 0..bank.slots() {
        let p = project_value(bank.value(i), &model.embedding).unwrap();
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() <= 1e-9, "slot {i}: {total}");
        assert!(p.iter().all(|x| *x >= 0.0));
    }
    let reports = top_scoring_report(&model, &vocab, &world, 5, &(0..bank.slots()).collect::<Vec<_>>()).unwrap();
    for r in reports {
        assert!((r.mass - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn top_triggering_matches_full_sort_on_every_column() {
    let (_, _, _, mut m) = matrix(6, Activation::Relu);
    // Force ties so the index tiebreak is exercised.
    let w = m.weights[3][0];
    m.weights[7][0] = w;
    m.weights[11][0] = w;
    for key in 0..m.slots() {
        for k in [1, 5, m.questions(), m.questions() + 3] {
            let col = m.column(key);
            let mut oracle: Vec<usize> = (0..col.len()).collect();
            oracle.sort_by(|&a, &b| col[b].partial_cmp(&col[a]).unwrap().then(a.cmp(&b)));
            oracle.truncate(k);
            let got: Vec<usize> = top_triggering(&m, key, k).unwrap().triggers.iter().map(|t| t.question).collect();
            assert_eq!(got, oracle, "key {key} k {k}");
        }
    }
    assert!(top_triggering(&m, m.slots(), 1).is_err());
}

fn surgery_case(seed: u64) -> (Seq2SeqModel<f64>, SurgeryOp) {
    let model = mounted(40, seed, Activation::Relu);
    let mut rng = rng_for(seed, "op");
    let original = rng.random_range(4..40);
    let target = 4 + (original - 4 + rng.random_range(1..36)) % 36;
    let op = SurgeryOp {
        slot: rng.random_range(0..12),
        lambda: rng.random_range(0.01..0.2),
        original,
        target,
    };
    (model, op)
}

#[test]
fn surgery_touches_exactly_one_value_row() {
    for seed in 0..20 {
        let (model, op) = surgery_case(seed);
        let mut edited = model.clone();
        apply_surgery(&mut edited, &op).unwrap();
        let changed = changed_rows(&model, &edited);
        assert_eq!(changed.len(), 1, "seed {seed}: {changed:?}");
        assert_eq!(changed[0].0, "nkb.w2");
        assert_eq!(changed[0].1, op.slot);
    }
}

#[test]
fn surgery_is_reversed_by_its_inverse() {
    for seed in 0..20 {
        let (model, op) = surgery_case(seed);
        let mut edited = model.clone();
        apply_surgery(&mut edited, &op).unwrap();
        apply_surgery(&mut edited, &op.inverse()).unwrap();
        let (a, b) = (model.nkb().unwrap().value(op.slot), edited.nkb().unwrap().value(op.slot));
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_lambda_is_identity() {
    let (model, mut op) = surgery_case(1);
    op.lambda = 0.0;
    let mut edited = model.clone();
    apply_surgery(&mut edited, &op).unwrap();
    assert!(changed_rows(&model, &edited).is_empty());
}

/// The bank sits in the last decoder layer and no normalization follows it,
/// so at the first answer position the logit gap `target − original` moves by
/// exactly `λ·w′ₜ·‖E[target] − E[original]‖²`.
#[test]
fn value_update_shifts_the_logit_gap_by_the_first_order_term() {
    let (world, vocab) = small_world();
    let pairs = render_qa(&world, Partition::Base);
    for seed in 0..10u64 {
        let model = mounted(vocab.len(), seed, Activation::Relu);
        let src = vocab.encode(&pairs[seed as usize].question).unwrap();
        let first = |m: &Seq2SeqModel<f64>| {
            m.greedy_decode_prompted(std::slice::from_ref(&src), &QA_PROMPT, 1)
                .unwrap()
                .pop()
                .unwrap()
        };
        let before = first(&model);
        let w = &before.trace.weights[0];
        let slot = select_target_slot(w).unwrap();
        let original = before.step_logits[0]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let target = (original + 1 + seed as usize) % vocab.len();
        let e = &model.embedding;
        let norm2: f64 = e.row(target).iter().zip(e.row(original)).map(|(t, o)| (t - o).powi(2)).sum();
        for lambda in [0.01, 0.05, 0.09] {
            let op = SurgeryOp {
                slot,
                lambda,
                original,
                target,
            };
            let mut edited = model.clone();
            apply_surgery(&mut edited, &op).unwrap();
            let after = first(&edited);
            assert_eq!(after.trace.weights[0], before.trace.weights[0]);
            let gap = |l: &[f64]| l[target] - l[original];
            let moved = gap(&after.step_logits[0]) - gap(&before.step_logits[0]);
            let predicted = lambda * w[slot] * norm2;
            assert!(
                (moved - predicted).abs() <= 1e-9 * predicted.abs().max(1.0),
                "seed {seed} lambda {lambda}: {moved} vs {predicted}"
            );
        }
    }
}

#[test]
fn target_slot_is_the_argmax_of_a_real_trace() {
    let (world, vocab) = small_world();
    let model = mounted(vocab.len(), 8, Activation::Relu);
    let pairs = render_qa(&world, Partition::Base);
    let src = vocab.encode(&pairs[0].question).unwrap();
    let d = model.greedy_decode_prompted(&[src], &QA_PROMPT, 1).unwrap().pop().unwrap();
    let w = &d.trace.weights[0];
    let slot = select_target_slot(w).unwrap();
    assert!(w.iter().all(|x| *x <= w[slot]));
}
