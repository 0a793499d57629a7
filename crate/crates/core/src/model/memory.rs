// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stand-alone sublayer functions on plain tensors.
//!
//! `ffn_forward` is the matrix form `ActFunc(H·W1ᵀ)·W2`. `ffn_memory_forward`
//! and `nkb_forward` evaluate the same computation one memory slot at a time:
//! score `sᵢ = h·kᵢ`, weight `wᵢ = ActFunc(sᵢ)`, output `Σᵢ wᵢ·vᵢ`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Activation, AttentionLayout, Tape};
use crate::tensor::{matmul_into, Tensor};

use super::{AttentionParams, FfnParams, NeuralKnowledgeBank};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    None,
    Causal,
}

/// Multi-head self-attention of one sequence `x: [len×d]`, including the
/// output projection.
pub fn self_attention<S: Scalar>(
    x: &Tensor<S>,
    p: &AttentionParams<S>,
    heads: usize,
    mask: AttentionMask,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let xv = tape.leaf_ref(x, false);
    let (wq, wk, wv, wo) = (
        tape.leaf_ref(&p.wq, false),
        tape.leaf_ref(&p.wk, false),
        tape.leaf_ref(&p.wv, false),
        tape.leaf_ref(&p.wo, false),
    );
    let q = tape.matmul(xv, wq)?;
    let k = tape.matmul(xv, wk)?;
    let v = tape.matmul(xv, wv)?;
    let layout = AttentionLayout::packed(&[x.rows()], heads, mask == AttentionMask::Causal);
    let o = tape.attention(q, k, v, layout)?;
    let out = tape.matmul(o, wo)?;
    Ok(tape.value(out).clone())
}

fn check_ffn<S: Scalar>(d: usize, w1: &Tensor<S>, w2: &Tensor<S>) -> Result<()> {
    if w1.cols() != d || w2.cols() != d || w1.rows() != w2.rows() {
        return Err(Error::Shape {
            op: "ffn",
            lhs: w1.shape().to_vec(),
            rhs: w2.shape().to_vec(),
        });
    }
    Ok(())
}

/// `ActFunc(H·W1ᵀ)·W2` for `h: [len×d]`.
pub fn ffn_forward<S: Scalar>(h: &Tensor<S>, p: &FfnParams<S>, act: Activation) -> Result<Tensor<S>> {
    let d = h.cols();
    check_ffn(d, &p.w1, &p.w2)?;
    let (len, slots) = (h.rows(), p.w1.rows());
    let mut scores = vec![S::zero(); len * slots];
    matmul_into(h.data(), len, d, p.w1.data(), slots, true, &mut scores);
    scores.iter_mut().for_each(|s| *s = act.apply(*s));
    let mut out = vec![S::zero(); len * d];
    matmul_into(&scores, len, slots, p.w2.data(), d, false, &mut out);
    Tensor::matrix(len, d, out)
}

fn slot_sum<S: Scalar>(h: &[S], keys: &Tensor<S>, values: &Tensor<S>, act: Activation, out: &mut [S]) -> Vec<S> {
    let mut weights = Vec::with_capacity(keys.rows());
    for i in 0..keys.rows() {
        let score: S = h.iter().zip(keys.row(i)).map(|(&a, &b)| a * b).sum();
        let w = act.apply(score);
        weights.push(w);
        if w != S::zero() {
            for (o, &v) in out.iter_mut().zip(values.row(i)) {
                *o += w * v;
            }
        }
    }
    weights
}

/// Key-value memory reading of one token's FFN: returns the output and the
/// intermediate state `[w₁; …; w_{4d}]`.
pub fn ffn_memory_forward<S: Scalar>(h: &[S], p: &FfnParams<S>, act: Activation) -> Result<(Vec<S>, Vec<S>)> {
    check_ffn(h.len(), &p.w1, &p.w2)?;
    let mut out = vec![S::zero(); h.len()];
    let inter = slot_sum(h, &p.w1, &p.w2, act, &mut out);
    Ok((out, inter))
}

/// FFN with the bank's slots appended: output `Σ wᵢ vᵢ + Σ w′ᵢ v′ᵢ`, plus the
/// bank weights `w′`.
pub fn nkb_forward<S: Scalar>(
    h: &[S],
    p: &FfnParams<S>,
    nkb: &NeuralKnowledgeBank<S>,
    act: Activation,
) -> Result<(Vec<S>, Vec<S>)> {
    check_ffn(h.len(), &p.w1, &p.w2)?;
    check_ffn(h.len(), &nkb.w1, &nkb.w2)?;
    let mut out = vec![S::zero(); h.len()];
    slot_sum(h, &p.w1, &p.w2, act, &mut out);
    let bank = slot_sum(h, &nkb.w1, &nkb.w2, act, &mut out);
    Ok((out, bank))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ffn(w1: &[&[f64]], w2: &[&[f64]]) -> FfnParams<f64> {
        FfnParams {
            w1: Tensor::from_rows(w1),
            w2: Tensor::from_rows(w2),
        }
    }

    #[test]
    fn hand_evaluated_ffn() {
        let p = ffn(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[2.0, 0.0], &[0.0, 3.0]]);
        let h = Tensor::from_rows(&[&[1.0, 0.0]]);
        let out = ffn_forward(&h, &p, Activation::Relu).unwrap();
        assert_eq!(out.data(), &[2.0, 0.0]);
        let (mem, inter) = ffn_memory_forward(&[1.0, 0.0], &p, Activation::Relu).unwrap();
        assert_eq!(mem, vec![2.0, 0.0]);
        assert_eq!(inter, vec![1.0, 0.0]);
    }

    #[test]
    fn zero_keys_give_zero_output() {
        let zeros: Vec<&[f64]> = vec![&[0.0, 0.0]; 8];
        let ones: Vec<&[f64]> = vec![&[1.0, 1.0]; 8];
        let p = ffn(&zeros, &ones);
        let h = Tensor::from_rows(&[&[0.3, -2.0]]);
        let out = ffn_forward(&h, &p, Activation::Relu).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_active_slot_returns_scaled_value() {
        let p = ffn(&[&[1.0, 1.0], &[-1.0, 0.0], &[0.0, -1.0]], &[&[0.5, 2.0], &[9.0, 9.0], &[7.0, 7.0]]);
        let (out, inter) = ffn_memory_forward(&[1.0, 2.0], &p, Activation::Relu).unwrap();
        assert_eq!(inter, vec![3.0, 0.0, 0.0]);
        assert_eq!(out, vec![1.5, 6.0]);
    }

    #[test]
    fn one_slot_bank_adds_relu_scaled_value() {
        let p = ffn(&[&[1.0, 0.0]], &[&[1.0, 1.0]]);
        let bank = NeuralKnowledgeBank {
            w1: Tensor::from_rows(&[&[0.5, 2.0]]),
            w2: Tensor::from_rows(&[&[-1.0, 4.0]]),
        };
        let h = [2.0, 1.0];
        let (out, w) = nkb_forward(&h, &p, &bank, Activation::Relu).unwrap();
        // base: relu(2)·[1,1] = [2,2]; bank: relu(1 + 2)·[-1,4] = [-3,12]
        assert_eq!(w, vec![3.0]);
        assert_eq!(out, vec![-1.0, 14.0]);
    }

    #[test]
    fn bad_shapes_are_errors() {
        let p = ffn(&[&[1.0, 0.0, 0.0]], &[&[1.0, 1.0]]);
        assert!(ffn_memory_forward(&[1.0, 0.0], &p, Activation::Relu).is_err());
    }
}
