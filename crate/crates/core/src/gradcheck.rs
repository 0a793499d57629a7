// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference gradient checks for the tape ops and the full
//! seq2seq loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{special, ModelConfig, NkbInit, NkbSite, Seq2SeqModel};
use crate::rng::{rng_for, LabRng};
use crate::tape::{Activation, AttentionLayout, Tape, Var};
use crate::tensor::Tensor;

/// Difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Every tape op with a check, in report order.
pub const OPS: [&str; 15] = [
    "matmul",
    "matmul_bt",
    "add",
    "mul",
    "scale",
    "sum",
    "softmax",
    "relu",
    "gelu",
    "layer_norm",
    "gather",
    "attention_self",
    "attention_cross",
    "dropout",
    "cross_entropy",
];

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    // Kept away from 0 so relu kinks sit far outside the difference step.
    let data = (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                x
            } else {
                -x
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// ‖a − n‖ / max(‖a‖, ‖n‖); the absolute difference when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

type Build = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>;

/// Reduces an op output to a scalar with fixed random weights.
fn readout(tape: &mut Tape<'_, f64>, out: Var) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(random(&shape, &mut rng_for(99, "readout")));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn eval(inputs: &[Tensor<f64>], build: &Build) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = readout(&mut tape, out)?;
    Ok(tape.value(loss).item())
}

/// Worst relative error over the inputs listed in `wrt`, every element probed.
fn check(inputs: Vec<Tensor<f64>>, wrt: &[usize], build: &Build) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if wrt.contains(&i) {
                tape.leaf(t.clone().with_grad())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = build(&mut tape, &vars)?;
    let loss = readout(&mut tape, out)?;
    tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for &i in wrt {
        let analytic = tape
            .grad(vars[i])
            .ok_or_else(|| Error::contract("input received no gradient"))?
            .to_vec();
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut probe = inputs.clone();
            probe[i].data_mut()[j] += STEP;
            let up = eval(&probe, build)?;
            probe[i].data_mut()[j] -= 2.0 * STEP;
            let down = eval(&probe, build)?;
            *slot = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

fn dims(rng: &mut impl Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..5))
}

type Make = fn(&mut LabRng) -> Vec<Tensor<f64>>;

fn two_same(rng: &mut LabRng) -> Vec<Tensor<f64>> {
    let (m, k, _) = dims(rng);
    vec![random(&[m, k], rng), random(&[m, k], rng)]
}

fn one(rng: &mut LabRng) -> Vec<Tensor<f64>> {
    let (m, k, _) = dims(rng);
    vec![random(&[m, k + 1], rng)]
}

fn case(op: &str) -> Result<(Make, &'static [usize], Box<Build>)> {
    Ok(match op {
        "matmul" => (
            |rng| {
                let (m, k, n) = dims(rng);
                vec![random(&[m, k], rng), random(&[k, n], rng)]
            },
            &[0, 1],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        "matmul_bt" => (
            |rng| {
                let (m, k, n) = dims(rng);
                vec![random(&[m, k], rng), random(&[n, k], rng)]
            },
            &[0, 1],
            Box::new(|t, v| t.matmul_bt(v[0], v[1])),
        ),
        "add" => (two_same, &[0, 1], Box::new(|t, v| t.add(v[0], v[1]))),
        "mul" => (two_same, &[0, 1], Box::new(|t, v| t.mul(v[0], v[1]))),
        "scale" => (one, &[0], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        "sum" => (one, &[0], Box::new(|t, v| Ok(t.sum(v[0])))),
        "softmax" => (one, &[0], Box::new(|t, v| Ok(t.row_softmax(v[0])))),
        "relu" => (one, &[0], Box::new(|t, v| Ok(t.act(v[0], Activation::Relu)))),
        "gelu" => (one, &[0], Box::new(|t, v| Ok(t.act(v[0], Activation::Gelu)))),
        "layer_norm" => (
            |rng| {
                let (m, k, _) = dims(rng);
                vec![random(&[m, k + 1], rng), random(&[k + 1], rng)]
            },
            &[0, 1],
            Box::new(|t, v| t.layer_norm(v[0], v[1], 1e-6)),
        ),
        "gather" => (
            one,
            &[0],
            Box::new(|t, v| {
                let rows = t.value(v[0]).rows();
                let ids: Vec<usize> = (0..5).map(|i| (i * 7 + 3) % rows).collect();
                t.gather(v[0], &ids)
            }),
        ),
        "attention_self" => (
            |rng| {
                let d = 2 * rng.random_range(1..4);
                vec![random(&[5, d], rng), random(&[5, d], rng), random(&[5, d], rng)]
            },
            &[0, 1, 2],
            Box::new(|t, v| t.attention(v[0], v[1], v[2], AttentionLayout::packed(&[2, 3], 2, true))),
        ),
        "attention_cross" => (
            |rng| {
                let d = 2 * rng.random_range(1..3);
                vec![random(&[4, d], rng), random(&[5, d], rng), random(&[5, d], rng)]
            },
            &[0, 1, 2],
            Box::new(|t, v| t.attention(v[0], v[1], v[2], AttentionLayout::cross(&[1, 3], &[2, 3], 2))),
        ),
        // The mask stream is reseeded on every evaluation.
        "dropout" => (one, &[0], Box::new(|t, v| Ok(t.dropout(v[0], 0.3, &mut rng_for(5, "mask"))))),
        "cross_entropy" => (
            |rng| {
                let (m, _, _) = dims(rng);
                vec![random(&[m + 2, 6], rng)]
            },
            &[0],
            Box::new(|t, v| {
                let rows = t.value(v[0]).rows();
                // Row 1 carries the ignore index.
                let targets: Vec<usize> = (0..rows).map(|i| if i == 1 { 0 } else { 1 + i % 5 }).collect();
                t.cross_entropy(v[0], &targets, 0)
            }),
        ),
        other => return Err(Error::contract(format!("no gradient check for `{other}`"))),
    })
}

/// Worst relative error of `op` over `instances` seeded random inputs.
pub fn op_error(op: &str, instances: u64) -> Result<f64> {
    let (make, wrt, build) = case(op)?;
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let mut rng = rng_for(inst, op);
        worst = worst.max(check(make(&mut rng), wrt, &*build)?);
    }
    Ok(worst)
}

fn tiny_model(seed: u64, activation: Activation) -> Result<Seq2SeqModel<f64>> {
    let mut config = ModelConfig::desk(12);
    config.num_layers = 1;
    config.model_dim = 8;
    config.num_heads = 2;
    config.max_seq_len = 8;
    config.activation = activation;
    // Larger than the training init so every gradient sits well above noise.
    config.init_std = 0.3;
    config.embedding_std = 1.5;
    config.nkb_site = NkbSite::last_decoder(1);
    let mut rng = rng_for(seed, "gradcheck-model");
    let mut m = Seq2SeqModel::new(config, &mut rng)?;
    let init = NkbInit {
        key_std: 0.3,
        value_std: 0.3,
    };
    m.mount_nkb(NkbSite::last_decoder(1), 4, init, &mut rng)?;
    Ok(m)
}

fn model_loss<'a>(model: &'a Seq2SeqModel<f64>, tape: &mut Tape<'a, f64>, train: bool) -> Result<(Vec<Var>, Var)> {
    let srcs: [&[usize]; 2] = [&[4, 5, 6], &[7, 8]];
    let decs: [&[usize]; 2] = [&[special::BOS, 9], &[special::BOS, 10, 11]];
    let labels = [9, special::EOS, 10, 11, special::PAD];
    let b = model.bind(tape, |_| train);
    let pass = model.forward_batch(tape, &b, &srcs, &decs, None)?;
    let loss = tape.cross_entropy(pass.logits, &labels, special::PAD)?;
    Ok((b.vars, loss))
}

fn loss_value(model: &Seq2SeqModel<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let (_, loss) = model_loss(model, &mut tape, false)?;
    Ok(tape.value(loss).item())
}

/// Relative error of the full masked cross-entropy gradient of a small
/// mounted model: forty sampled coordinates across all parameters plus one in
/// each bank matrix.
pub fn seq2seq_loss_error(seed: u64, activation: Activation) -> Result<f64> {
    let model = tiny_model(seed, activation)?;
    let named = model.named_params();
    let grads: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let (vars, loss) = model_loss(&model, &mut tape, true)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(&named)
            .map(|(&v, (_, p))| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
            .collect()
    };
    let mut rng = rng_for(seed, "gradcheck-coords");
    let mut coords: Vec<(usize, usize)> = (0..40)
        .map(|_| {
            let p = rng.random_range(0..grads.len());
            (p, rng.random_range(0..grads[p].len()))
        })
        .collect();
    for (p, (name, _)) in named.iter().enumerate() {
        if name.starts_with("nkb.") {
            coords.push((p, rng.random_range(0..grads[p].len())));
        }
    }
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (p, j) in coords {
        let mut m = model.clone();
        m.params_mut()[p].data_mut()[j] += STEP;
        let up = loss_value(&m)?;
        m.params_mut()[p].data_mut()[j] -= 2.0 * STEP;
        let down = loss_value(&m)?;
        analytic.push(grads[p][j]);
        numeric.push((up - down) / (2.0 * STEP));
    }
    Ok(rel_err(&analytic, &numeric))
}

/// Worst full-loss error over `instances` seeds with each activation.
pub fn seq2seq_error(instances: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        for act in [Activation::Relu, Activation::Gelu] {
            worst = worst.max(seq2seq_loss_error(seed, act)?);
        }
    }
    Ok(worst)
}
