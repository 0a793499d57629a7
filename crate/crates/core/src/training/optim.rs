// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, HashSet};

use super::OptimizerKind;
use crate::error::{Error, Result};
use crate::model::{is_nkb_param, Seq2SeqModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Added to squared gradients before factoring.
pub const ADAFACTOR_EPS: f64 = 1e-30;
/// Second-moment decay `1 − t^(−0.8)`.
pub const ADAFACTOR_DECAY_POW: f64 = 0.8;
/// Updates are scaled down when their RMS exceeds this.
pub const ADAFACTOR_CLIP: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<String>,
    pub frozen: bool,
}

impl ParamGroup {
    /// `base` (everything outside the bank) and, when mounted, `nkb`.
    pub fn split<S: Scalar>(model: &Seq2SeqModel<S>, base_frozen: bool, nkb_frozen: bool) -> Vec<ParamGroup> {
        let (nkb, base): (Vec<String>, Vec<String>) = model
            .named_params()
            .into_iter()
            .map(|(n, _)| n)
            .partition(|n| is_nkb_param(n));
        let mut groups = vec![ParamGroup {
            name: "base".into(),
            params: base,
            frozen: base_frozen,
        }];
        if !nkb.is_empty() {
            groups.push(ParamGroup {
                name: "nkb".into(),
                params: nkb,
                frozen: nkb_frozen,
            });
        }
        groups
    }

    /// Names of parameters in unfrozen groups; every model parameter must sit
    /// in exactly one group.
    pub fn trainable<S: Scalar>(groups: &[ParamGroup], model: &Seq2SeqModel<S>) -> Result<HashSet<String>> {
        let mut seen = HashSet::new();
        let mut out = HashSet::new();
        for g in groups {
            for p in &g.params {
                if !seen.insert(p.clone()) {
                    return Err(Error::contract(format!("parameter `{p}` is in more than one group")));
                }
                if !g.frozen {
                    out.insert(p.clone());
                }
            }
        }
        for (name, _) in model.named_params() {
            if !seen.contains(&name) {
                return Err(Error::contract(format!("parameter `{name}` is in no group")));
            }
        }
        if seen.len() != model.named_params().len() {
            return Err(Error::contract("a group names a parameter the model does not have"));
        }
        Ok(out)
    }
}

pub fn global_norm<S: Scalar>(grads: &[Option<Vec<S>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Option<Vec<S>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let f = S::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= f;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum SlotState<S> {
    Adam { m: Vec<S>, v: Vec<S> },
    Factored { row: Vec<S>, col: Vec<S> },
    Unfactored { v: Vec<S> },
}

/// Per-parameter moments, keyed by parameter name, plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S> {
    pub kind: OptimizerKind,
    pub step: u64,
    pub(crate) slots: BTreeMap<String, SlotState<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Named state blocks for persistence: `(name, shape, values)`.
    pub fn blocks(&self) -> Vec<(String, Vec<usize>, &[S])> {
        let mut out = Vec::new();
        for (name, slot) in &self.slots {
            match slot {
                SlotState::Adam { m, v } => {
                    out.push((format!("adam.m.{name}"), vec![m.len()], m.as_slice()));
                    out.push((format!("adam.v.{name}"), vec![v.len()], v.as_slice()));
                }
                SlotState::Factored { row, col } => {
                    out.push((format!("adafactor.row.{name}"), vec![row.len()], row.as_slice()));
                    out.push((format!("adafactor.col.{name}"), vec![col.len()], col.as_slice()));
                }
                SlotState::Unfactored { v } => {
                    out.push((format!("adafactor.v.{name}"), vec![v.len()], v.as_slice()));
                }
            }
        }
        out
    }

    /// Inverse of [`Self::blocks`].
    pub fn from_blocks(kind: OptimizerKind, step: u64, blocks: Vec<(String, Vec<S>)>) -> Result<Self> {
        let mut slots: BTreeMap<String, SlotState<S>> = BTreeMap::new();
        let mut pending_m: BTreeMap<String, Vec<S>> = BTreeMap::new();
        let mut pending_row: BTreeMap<String, Vec<S>> = BTreeMap::new();
        for (block, data) in blocks {
            let bad = || Error::format(format!("unexpected optimizer block `{block}` for {kind}"));
            let (tag, name) = match kind {
                OptimizerKind::Adam => block.strip_prefix("adam.").ok_or_else(bad)?,
                OptimizerKind::Adafactor => block.strip_prefix("adafactor.").ok_or_else(bad)?,
            }
            .split_once('.')
            .ok_or_else(bad)?;
            let name = name.to_string();
            match (kind, tag) {
                (OptimizerKind::Adam, "m") => {
                    pending_m.insert(name, data);
                }
                (OptimizerKind::Adam, "v") => {
                    let m = pending_m.remove(&name).ok_or_else(bad)?;
                    slots.insert(name, SlotState::Adam { m, v: data });
                }
                (OptimizerKind::Adafactor, "row") => {
                    pending_row.insert(name, data);
                }
                (OptimizerKind::Adafactor, "col") => {
                    let row = pending_row.remove(&name).ok_or_else(bad)?;
                    slots.insert(name, SlotState::Factored { row, col: data });
                }
                (OptimizerKind::Adafactor, "v") => {
                    slots.insert(name, SlotState::Unfactored { v: data });
                }
                _ => return Err(bad()),
            }
        }
        if !pending_m.is_empty() || !pending_row.is_empty() {
            return Err(Error::format("incomplete optimizer state"));
        }
        Ok(Self { kind, step, slots })
    }

    /// One update of every trainable parameter. `grads` follows
    /// [`Seq2SeqModel::named_params`] order; `None` means no gradient. Checks
    /// finiteness, clips to `clip_norm`, then updates. Parameters outside
    /// `trainable` are never touched. Returns the pre-clip gradient norm.
    pub fn step(
        &mut self,
        model: &mut Seq2SeqModel<S>,
        trainable: &HashSet<String>,
        mut grads: Vec<Option<Vec<S>>>,
        lr: f64,
        clip_norm: f64,
    ) -> Result<f64> {
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if grads.len() != names.len() {
            return Err(Error::contract("one gradient slot per parameter"));
        }
        for (g, name) in grads.iter_mut().zip(&names) {
            if !trainable.contains(name) {
                *g = None;
            } else if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        param: name.clone(),
                        step: self.step as usize + 1,
                    });
                }
            }
        }
        let norm = clip_global_norm(&mut grads, clip_norm);
        self.step += 1;
        let t = self.step as f64;
        for ((param, grad), name) in model.params_mut().into_iter().zip(grads).zip(&names) {
            let Some(grad) = grad else { continue };
            match self.kind {
                OptimizerKind::Adam => adam_update(&mut self.slots, name, param, &grad, lr, t),
                OptimizerKind::Adafactor => adafactor_update(&mut self.slots, name, param, &grad, lr, t),
            }
        }
        Ok(norm)
    }
}

fn adam_update<S: Scalar>(
    slots: &mut BTreeMap<String, SlotState<S>>,
    name: &str,
    param: &mut Tensor<S>,
    grad: &[S],
    lr: f64,
    t: f64,
) {
    let n = grad.len();
    let slot = slots.entry(name.to_string()).or_insert_with(|| SlotState::Adam {
        m: vec![S::zero(); n],
        v: vec![S::zero(); n],
    });
    let SlotState::Adam { m, v } = slot else {
        unreachable!("optimizer kind is fixed per state")
    };
    let (b1, b2) = (S::lit(ADAM_BETA1), S::lit(ADAM_BETA2));
    let c1 = S::lit(1.0 - ADAM_BETA1.powf(t));
    let c2 = S::lit(1.0 - ADAM_BETA2.powf(t));
    let lr = S::lit(lr);
    let eps = S::lit(ADAM_EPS);
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (S::one() - b1) * g;
        *v = b2 * *v + (S::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Factored second moments for matrices, a full one for vectors, no
/// momentum, update RMS clipped at [`ADAFACTOR_CLIP`], step size `lr`.
fn adafactor_update<S: Scalar>(
    slots: &mut BTreeMap<String, SlotState<S>>,
    name: &str,
    param: &mut Tensor<S>,
    grad: &[S],
    lr: f64,
    t: f64,
) {
    let decay = S::lit(1.0 - t.powf(-ADAFACTOR_DECAY_POW));
    let keep = S::one() - decay;
    let eps = S::lit(ADAFACTOR_EPS);
    let shape = param.shape().to_vec();
    let mut update: Vec<S> = Vec::with_capacity(grad.len());
    if shape.len() == 2 {
        let (r, c) = (shape[0], shape[1]);
        let slot = slots.entry(name.to_string()).or_insert_with(|| SlotState::Factored {
            row: vec![S::zero(); r],
            col: vec![S::zero(); c],
        });
        let SlotState::Factored { row, col } = slot else {
            unreachable!("matrix parameters use factored state")
        };
        let mut row_mean = vec![S::zero(); r];
        let mut col_mean = vec![S::zero(); c];
        for i in 0..r {
            for j in 0..c {
                let g2 = grad[i * c + j] * grad[i * c + j] + eps;
                row_mean[i] += g2;
                col_mean[j] += g2;
            }
        }
        for (x, m) in row.iter_mut().zip(&row_mean) {
            *x = decay * *x + keep * (*m / S::lit(c as f64));
        }
        for (x, m) in col.iter_mut().zip(&col_mean) {
            *x = decay * *x + keep * (*m / S::lit(r as f64));
        }
        let row_avg = row.iter().copied().sum::<S>() / S::lit(r as f64);
        for i in 0..r {
            for j in 0..c {
                let v = row[i] * col[j] / row_avg;
                update.push(grad[i * c + j] / v.sqrt());
            }
        }
    } else {
        let n = grad.len();
        let slot = slots
            .entry(name.to_string())
            .or_insert_with(|| SlotState::Unfactored { v: vec![S::zero(); n] });
        let SlotState::Unfactored { v } = slot else {
            unreachable!("vector parameters use unfactored state")
        };
        for (x, &g) in v.iter_mut().zip(grad) {
            *x = decay * *x + keep * (g * g + eps);
            update.push(g / x.sqrt());
        }
    }
    let rms = (update.iter().map(|&u| u * u).sum::<S>() / S::lit(update.len() as f64)).sqrt();
    let scale = S::lit(lr) / (rms / S::lit(ADAFACTOR_CLIP)).max(S::one());
    for (p, u) in param.data_mut().iter_mut().zip(update) {
        *p -= scale * u;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, NkbSite};
    use crate::rng::rng_for;

    fn model(nkb: usize) -> Seq2SeqModel<f64> {
        let cfg = ModelConfig {
            num_layers: 1,
            model_dim: 4,
            num_heads: 2,
            nkb_dim: nkb,
            nkb_site: NkbSite::last_decoder(1),
            ..ModelConfig::desk(7)
        };
        Seq2SeqModel::new(cfg, &mut rng_for(1, "optim")).unwrap()
    }

    fn grads_like(m: &Seq2SeqModel<f64>, x: f64) -> Vec<Option<Vec<f64>>> {
        m.named_params().iter().map(|(_, t)| Some(vec![x; t.len()])).collect()
    }

    fn all_trainable(m: &Seq2SeqModel<f64>) -> HashSet<String> {
        ParamGroup::trainable(&ParamGroup::split(m, false, false), m).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut m = model(0);
        let before = m.clone();
        let tr = all_trainable(&m);
        let mut opt = OptimizerState::new(OptimizerKind::Adam);
        let g = grads_like(&m, 0.0);
        opt.step(&mut m, &tr, g, 0.1, 1.0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn frozen_group_is_bit_identical() {
        let mut m = model(3);
        let before = m.clone();
        let groups = ParamGroup::split(&m, true, false);
        let tr = ParamGroup::trainable(&groups, &m).unwrap();
        for kind in [OptimizerKind::Adam, OptimizerKind::Adafactor] {
            let mut opt = OptimizerState::new(kind);
            for _ in 0..3 {
                let g = grads_like(&m, 0.3);
                opt.step(&mut m, &tr, g, 0.1, 1.0).unwrap();
            }
        }
        for ((name, a), (_, b)) in m.named_params().iter().zip(before.named_params()) {
            if is_nkb_param(name) {
                assert_ne!(a.data(), b.data(), "{name}");
            } else {
                assert_eq!(a.data(), b.data(), "{name}");
            }
        }
    }

    #[test]
    fn single_adam_step_matches_hand_recurrence() {
        // t = 1: m = 0.1, v = 0.001, m̂ = 1, v̂ = 1, so θ ← θ − lr / (1 + ε).
        let mut m = model(0);
        let before = m.clone();
        let tr: HashSet<String> = ["embedding".to_string()].into();
        let mut opt = OptimizerState::new(OptimizerKind::Adam);
        let g = grads_like(&m, 1.0);
        opt.step(&mut m, &tr, g, 0.1, 1e9).unwrap();
        let expected_delta = 0.1 / (1.0 + 1e-8);
        let (a, b) = (&m.embedding, &before.embedding);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(((y - x) - expected_delta).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g: Vec<Option<Vec<f64>>> = vec![Some(vec![3.0, 4.0]), None, Some(vec![12.0])];
        let pre = clip_global_norm(&mut g, 1.0);
        assert_eq!(pre, 13.0);
        assert!(global_norm(&g) <= 1.0 + 1e-9);
        let mut small: Vec<Option<Vec<f64>>> = vec![Some(vec![0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap()[0], 0.1);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut m = model(0);
        let tr = all_trainable(&m);
        let mut g = grads_like(&m, 0.1);
        g[3].as_mut().unwrap()[0] = f64::NAN;
        let name = m.named_params()[3].0.clone();
        let before = m.clone();
        let mut opt = OptimizerState::new(OptimizerKind::Adam);
        match opt.step(&mut m, &tr, g, 0.1, 1.0) {
            Err(Error::NonFiniteGradient { param, step }) => {
                assert_eq!(param, name);
                assert_eq!(step, 1);
            }
            other => panic!("expected diagnostic, got {other:?}"),
        }
        assert_eq!(m, before);
    }

    #[test]
    fn adafactor_first_step_is_sign_like_and_rms_clipped() {
        // With t = 1 the decay is 0, so V̂ = rowmean·colmean/mean(row) = g² for
        // a constant gradient and the update is lr·sign(g).
        let mut m = model(0);
        let before = m.clone();
        let tr: HashSet<String> = ["embedding".to_string()].into();
        let mut opt = OptimizerState::new(OptimizerKind::Adafactor);
        let g = grads_like(&m, -0.5);
        opt.step(&mut m, &tr, g, 0.01, 1e9).unwrap();
        for (x, y) in m.embedding.data().iter().zip(before.embedding.data()) {
            assert!(((x - y) - 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn state_blocks_round_trip() {
        let mut m = model(2);
        let tr = all_trainable(&m);
        for kind in [OptimizerKind::Adam, OptimizerKind::Adafactor] {
            let mut opt = OptimizerState::new(kind);
            let g = grads_like(&m, 0.2);
            opt.step(&mut m, &tr, g, 0.01, 1.0).unwrap();
            let blocks = opt
                .blocks()
                .into_iter()
                .map(|(n, _, d)| (n, d.to_vec()))
                .collect();
            assert_eq!(OptimizerState::from_blocks(kind, opt.step, blocks).unwrap(), opt);
        }
    }

    #[test]
    fn groups_must_cover_every_parameter_once() {
        let m = model(2);
        let mut groups = ParamGroup::split(&m, false, false);
        groups[0].params.pop();
        assert!(ParamGroup::trainable(&groups, &m).is_err());
        let mut groups = ParamGroup::split(&m, false, false);
        let dup = groups[0].params[0].clone();
        groups[1].params.push(dup);
        assert!(ParamGroup::trainable(&groups, &m).is_err());
    }
}
