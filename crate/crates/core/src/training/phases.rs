// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashSet;
use std::fmt;
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::checkpoint::{Checkpoint, RngState};
use super::data::{Batcher, Example, Sample};
use super::optim::{OptimizerState, ParamGroup};
use super::{lr_at, TrainConfig};
use crate::error::{Error, Result};
use crate::factworld::{Statement, Vocab};
use crate::model::{is_nkb_param, Dropout, special, Seq2SeqModel};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::tape::Tape;

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub phase: String,
    pub loss: f64,
    pub lr: f64,
    /// Seconds since the phase started.
    pub wall_time: f64,
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} phase={} loss={:.6} lr={:.6e} wall_time={:.3}",
            self.step, self.phase, self.loss, self.lr, self.wall_time
        )
    }
}

impl MetricRecord {
    pub fn parse(line: &str) -> Option<Self> {
        let mut rec = MetricRecord {
            step: 0,
            phase: String::new(),
            loss: 0.0,
            lr: 0.0,
            wall_time: 0.0,
        };
        let mut seen = 0;
        for field in line.split(' ') {
            let (k, v) = field.split_once('=')?;
            match k {
                "step" => rec.step = v.parse().ok()?,
                "phase" => rec.phase = v.to_string(),
                "loss" => rec.loss = v.parse().ok()?,
                "lr" => rec.lr = v.parse().ok()?,
                "wall_time" => rec.wall_time = v.parse().ok()?,
                _ => return None,
            }
            seen += 1;
        }
        (seen == 5).then_some(rec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseReport {
    pub phase: String,
    pub steps: usize,
    /// Loss of the first batch.
    pub initial_loss: f64,
    /// Mean loss of the last (up to) 20 batches.
    pub final_loss: f64,
}

impl fmt::Display for PhaseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "phase={} steps={} initial_loss={:.6} final_loss={:.6}",
            self.phase, self.steps, self.initial_loss, self.final_loss
        )
    }
}

/// Mean token cross-entropy of a batch, without gradients.
fn batch_loss<S: Scalar>(model: &Seq2SeqModel<S>, batch: &[Example]) -> Result<f64> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, |_| false);
    let srcs: Vec<&[usize]> = batch.iter().map(|e| e.source.as_slice()).collect();
    let decs: Vec<&[usize]> = batch.iter().map(|e| e.decoder_input.as_slice()).collect();
    let labels: Vec<usize> = batch.iter().flat_map(|e| e.labels.iter().copied()).collect();
    let pass = model.forward_batch(&mut tape, &b, &srcs, &decs, None)?;
    let loss = tape.cross_entropy(pass.logits, &labels, special::PAD)?;
    Ok(tape.value(loss).item().as_f64())
}

/// Exact masked-span loss: every span of every statement, equally weighted
/// per target token.
pub fn ssm_loss<S: Scalar>(model: &Seq2SeqModel<S>, vocab: &Vocab, statements: &[Statement]) -> Result<f64> {
    let mut examples = Vec::new();
    for s in statements {
        let tokens = vocab.encode(&s.tokens)?;
        for span in &s.spans {
            let mut input = tokens[..span.start].to_vec();
            input.push(special::SENTINEL);
            input.extend_from_slice(&tokens[span.end()..]);
            let mut target = vec![special::SENTINEL];
            target.extend_from_slice(&tokens[span.start..span.end()]);
            examples.push(Example::seq2seq(input, &target));
        }
    }
    if examples.is_empty() {
        return Err(Error::data("no masked spans to score"));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in examples.chunks(64) {
        let n = chunk
            .iter()
            .flat_map(|e| &e.labels)
            .filter(|&&l| l != special::PAD)
            .count();
        total += batch_loss(model, chunk)? * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// SHA-256 of every parameter block's little-endian `f64` bytes.
pub fn param_hashes<S: Scalar>(model: &Seq2SeqModel<S>) -> Vec<(String, String)> {
    model
        .named_params()
        .into_iter()
        .map(|(name, t)| {
            let mut h = Sha256::new();
            for &x in t.data() {
                h.update(x.as_f64().to_le_bytes());
            }
            (name, hex::encode(h.finalize()))
        })
        .collect()
}

/// Runs `cfg.max_steps` updates over `samples`, updating `ckpt` in place.
/// A checkpoint written by the same phase resumes where it stopped. On a
/// non-finite loss or gradient the step is abandoned and `ckpt` keeps the last
/// good state.
pub fn train_phase<S: Scalar>(
    ckpt: &mut Checkpoint<S>,
    samples: Vec<Sample>,
    groups: &[ParamGroup],
    cfg: &TrainConfig,
    phase: &str,
    metrics: &mut dyn FnMut(&MetricRecord),
) -> Result<PhaseReport> {
    cfg.validate()?;
    let trainable: HashSet<String> = ParamGroup::trainable(groups, &ckpt.model)?;
    let mut batcher = Batcher::new(samples, cfg.batch_size, cfg.seed)?;
    let resumable = ckpt.meta("phase") == Some(phase)
        && ckpt.optimizer.as_ref().is_some_and(|o| o.kind == cfg.optimizer)
        && ckpt.rng.is_some();
    let (start, mut optimizer, mut rng) = if resumable {
        (
            ckpt.step as usize,
            ckpt.optimizer.take().expect("checked"),
            ckpt.rng.expect("checked").restore(),
        )
    } else {
        (0, OptimizerState::new(cfg.optimizer), rng_for(cfg.seed, "stream"))
    };
    let use_dropout = cfg.dropout > 0.0 || cfg.nkb_dropout > 0.0;
    let started = Instant::now();
    let mut losses = Vec::new();
    let mut outcome = Ok(());
    let mut done = start;
    for t in start..cfg.max_steps {
        let lr = lr_at(t + 1, cfg);
        let stream_before = rng.clone();
        let batch = batcher.batch(t, &mut rng);
        let srcs: Vec<&[usize]> = batch.iter().map(|e| e.source.as_slice()).collect();
        let decs: Vec<&[usize]> = batch.iter().map(|e| e.decoder_input.as_slice()).collect();
        let labels: Vec<usize> = batch.iter().flat_map(|e| e.labels.iter().copied()).collect();
        let mut dropout = use_dropout.then(|| Dropout {
            rate: cfg.dropout,
            nkb_rate: cfg.nkb_dropout,
            rng: rng.clone(),
        });
        let step_result = (|| -> Result<(f64, Vec<Option<Vec<S>>>)> {
            let mut tape = Tape::new();
            let b = ckpt.model.bind(&mut tape, |n| trainable.contains(n));
            let pass = ckpt.model.forward_batch(&mut tape, &b, &srcs, &decs, dropout.as_mut())?;
            let loss_var = tape.cross_entropy(pass.logits, &labels, special::PAD)?;
            let loss = tape.value(loss_var).item().as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { step: t + 1, loss });
            }
            tape.backward(loss_var)?;
            let grads = b.vars.iter().map(|&v| tape.take_grad(v)).collect();
            Ok((loss, grads))
        })();
        if let Some(d) = dropout {
            rng = d.rng;
        }
        let (loss, grads) = match step_result {
            Ok(r) => r,
            Err(e) => {
                rng = stream_before;
                outcome = Err(e);
                break;
            }
        };
        if let Err(e) = optimizer.step(&mut ckpt.model, &trainable, grads, lr, cfg.clip_norm) {
            // The step counter advanced only on success.
            rng = stream_before;
            outcome = Err(e);
            break;
        }
        losses.push(loss);
        done = t + 1;
        metrics(&MetricRecord {
            step: done,
            phase: phase.to_string(),
            loss,
            lr,
            wall_time: started.elapsed().as_secs_f64(),
        });
    }
    ckpt.step = done as u64;
    ckpt.optimizer = Some(optimizer);
    ckpt.rng = Some(RngState::capture(&rng));
    ckpt.meta.retain(|(k, _)| k != "phase");
    ckpt.meta.push(("phase".into(), phase.to_string()));
    outcome?;
    let tail = &losses[losses.len().saturating_sub(20)..];
    Ok(PhaseReport {
        phase: phase.to_string(),
        steps: losses.len(),
        initial_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_loss: if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        },
    })
}

fn ssm_samples(vocab: &Vocab, statements: &[Statement]) -> Result<Vec<Sample>> {
    statements.iter().map(|s| Sample::ssm(vocab, s)).collect()
}

/// Masked-span pretraining of the base model; a mounted bank stays frozen.
pub fn pretrain_base<S: Scalar>(
    ckpt: &mut Checkpoint<S>,
    vocab: &Vocab,
    statements: &[Statement],
    cfg: &TrainConfig,
    metrics: &mut dyn FnMut(&MetricRecord),
) -> Result<PhaseReport> {
    let groups = ParamGroup::split(&ckpt.model, false, true);
    train_phase(ckpt, ssm_samples(vocab, statements)?, &groups, cfg, "pretrain", metrics)
}

/// Masked-span training of the bank only. Refuses to run unless the bank is
/// mounted and every other parameter sits in a frozen group.
pub fn inject_knowledge<S: Scalar>(
    ckpt: &mut Checkpoint<S>,
    vocab: &Vocab,
    statements: &[Statement],
    cfg: &TrainConfig,
    groups: &[ParamGroup],
    metrics: &mut dyn FnMut(&MetricRecord),
) -> Result<PhaseReport> {
    if !ckpt.model.is_mounted() {
        return Err(Error::contract("knowledge injection needs a mounted knowledge bank"));
    }
    for g in groups.iter().filter(|g| !g.frozen) {
        if let Some(p) = g.params.iter().find(|p| !is_nkb_param(p)) {
            return Err(Error::contract(format!(
                "refusing to inject: base parameter `{p}` is in unfrozen group `{}`",
                g.name
            )));
        }
    }
    train_phase(ckpt, ssm_samples(vocab, statements)?, groups, cfg, "inject", metrics)
}

/// Whole-model training on fixed examples; zero steps leave `ckpt` untouched.
pub fn finetune<S: Scalar>(
    ckpt: &mut Checkpoint<S>,
    examples: Vec<Example>,
    cfg: &TrainConfig,
    phase: &str,
    metrics: &mut dyn FnMut(&MetricRecord),
) -> Result<PhaseReport> {
    if cfg.max_steps == 0 {
        cfg.validate()?;
        return Ok(PhaseReport {
            phase: phase.to_string(),
            steps: 0,
            initial_loss: f64::NAN,
            final_loss: f64::NAN,
        });
    }
    let groups = ParamGroup::split(&ckpt.model, false, false);
    let samples = examples.into_iter().map(Sample::Fixed).collect();
    train_phase(ckpt, samples, &groups, cfg, phase, metrics)
}

