// SPDX-License-Identifier: MIT OR Apache-2.0

//! Knowledge surgery: move one bank value vector from the embedding of the
//! current answer towards the embedding of a target answer, then measure
//! whether the answer flips and how many unrelated answers change.

use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::factworld::{QaPair, Vocab};
use crate::model::Seq2SeqModel;
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::training::QA_PROMPT;

pub const LAMBDA_GRID: [f64; 5] = [0.01, 0.03, 0.05, 0.07, 0.09];
pub const DEFAULT_CONTROLS: usize = 5;
/// Generation budget when comparing answers before and after an edit.
const ANSWER_LEN: usize = crate::factworld::MAX_ANSWER_TOKENS + 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurgeryOp {
    pub slot: usize,
    pub lambda: f64,
    pub original: usize,
    pub target: usize,
}

impl SurgeryOp {
    pub fn validate(&self, slots: usize, vocab_size: usize) -> Result<()> {
        if self.slot >= slots {
            return Err(Error::contract(format!(
                "slot {} out of range for {slots} slots",
                self.slot
            )));
        }
        if self.original >= vocab_size || self.target >= vocab_size {
            return Err(Error::contract("surgery token outside the vocabulary"));
        }
        if self.original == self.target {
            return Err(Error::contract("surgery target equals the original answer"));
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        Self {
            lambda: -self.lambda,
            ..*self
        }
    }
}

/// Highest entry of `w′`, lowest index on ties.
pub fn select_target_slot<S: Scalar>(weights: &[S]) -> Result<usize> {
    if weights.iter().all(|w| *w == S::zero()) {
        return Err(Error::contract("no active slot"));
    }
    let mut best = 0;
    for (i, &w) in weights.iter().enumerate().skip(1) {
        if w > weights[best] {
            best = i;
        }
    }
    Ok(best)
}

/// `W2′[t] += λ·(E[target] − E[original])`. Nothing else is touched.
pub fn apply_surgery<S: Scalar>(model: &mut Seq2SeqModel<S>, op: &SurgeryOp) -> Result<()> {
    let vocab_size = model.config.vocab_size;
    let slots = model.nkb()?.slots();
    op.validate(slots, vocab_size)?;
    let lambda = S::lit(op.lambda);
    let delta: Vec<S> = model
        .token_embedding(op.target)
        .iter()
        .zip(model.token_embedding(op.original))
        .map(|(&t, &o)| lambda * (t - o))
        .collect();
    let row = model.nkb_mut()?.w2.row_mut(op.slot);
    for (x, d) in row.iter_mut().zip(delta) {
        *x += d;
    }
    Ok(())
}

/// One question to edit, with everything fixed before any λ is tried.
#[derive(Clone, Debug, PartialEq)]
pub struct EditCase {
    pub id: usize,
    pub fact_id: usize,
    pub question: Vec<usize>,
    pub original: usize,
    pub target: usize,
    pub slot: usize,
}

impl EditCase {
    pub fn op(&self, lambda: f64) -> SurgeryOp {
        SurgeryOp {
            slot: self.slot,
            lambda,
            original: self.original,
            target: self.target,
        }
    }
}

/// Line record `question_id<TAB>target_token`; `question_id` is the fact id of
/// a question in the pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditSpec {
    pub question_id: usize,
    pub target: String,
}

pub fn write_edit_specs<W: Write>(mut out: W, specs: &[EditSpec]) -> Result<()> {
    for s in specs {
        writeln!(out, "{}\t{}", s.question_id, s.target)?;
    }
    Ok(())
}

pub fn read_edit_specs<R: BufRead>(input: R) -> Result<Vec<EditSpec>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::data(format!("edit spec line {}: expected `question_id<TAB>target`", n + 1));
        let (id, target) = line.split_once('\t').ok_or_else(bad)?;
        let target = target.trim();
        if target.is_empty() || target.contains(char::is_whitespace) {
            return Err(bad());
        }
        out.push(EditSpec {
            question_id: id.trim().parse().map_err(|_| bad())?,
            target: target.to_string(),
        });
    }
    Ok(out)
}

/// Specs for every question in `pool` whose gold answer is one token and whose
/// current prediction is a different single token; the target is the gold
/// answer.
pub fn wrong_answer_specs<S: Scalar>(
    model: &Seq2SeqModel<S>,
    vocab: &Vocab,
    pool: &[QaPair],
    threads: usize,
) -> Result<Vec<EditSpec>> {
    let sources: Vec<Vec<usize>> = pool
        .iter()
        .map(|p| vocab.encode(&p.question))
        .collect::<Result<_>>()?;
    let answers = answer_all(model, &sources, threads)?;
    let mut out = Vec::new();
    for (pair, pred) in pool.iter().zip(answers) {
        if pair.answer.len() != 1 || pred.len() != 1 {
            continue;
        }
        let gold = vocab.encode(&pair.answer[..1])?[0];
        if pred[0] != gold {
            out.push(EditSpec {
                question_id: pair.fact_id,
                target: pair.answer[0].clone(),
            });
        }
    }
    Ok(out)
}

/// Resolves specs against the model: the original answer is the current
/// single-token prediction and the slot is chosen at the first answer token.
pub fn build_edit_cases<S: Scalar>(
    model: &Seq2SeqModel<S>,
    vocab: &Vocab,
    pool: &[QaPair],
    specs: &[EditSpec],
) -> Result<Vec<EditCase>> {
    model.nkb()?;
    let mut cases = Vec::with_capacity(specs.len());
    for (id, spec) in specs.iter().enumerate() {
        let pair = pool
            .iter()
            .find(|p| p.fact_id == spec.question_id)
            .ok_or_else(|| Error::data(format!("no question with id {}", spec.question_id)))?;
        let question = vocab.encode(&pair.question)?;
        let target = vocab.encode(std::slice::from_ref(&spec.target))?[0];
        let decoded = model
            .greedy_decode_prompted(std::slice::from_ref(&question), &QA_PROMPT, ANSWER_LEN)?
            .pop()
            .expect("one decode per source");
        if decoded.tokens.len() != 1 {
            return Err(Error::data(format!(
                "question {} is not answered with a single token",
                spec.question_id
            )));
        }
        let original = decoded.tokens[0];
        if original == target {
            return Err(Error::data(format!(
                "question {} already answers `{}`",
                spec.question_id, spec.target
            )));
        }
        let slot = select_target_slot(&decoded.trace.weights[0])?;
        cases.push(EditCase {
            id,
            fact_id: spec.question_id,
            question,
            original,
            target,
            slot,
        });
    }
    Ok(cases)
}

fn answer_all<S: Scalar>(model: &Seq2SeqModel<S>, sources: &[Vec<usize>], threads: usize) -> Result<Vec<Vec<usize>>> {
    crate::par::map_chunks(sources, 64, threads, |c| {
        Ok(model
            .greedy_decode_prompted(c, &QA_PROMPT, ANSWER_LEN)?
            .into_iter()
            .map(|d| d.tokens)
            .collect())
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SurgeryOutcome {
    pub success: bool,
    pub destroyed: usize,
    pub controls: usize,
}

/// Applies `op` to a copy of `model`, then decodes the edited question and the
/// controls. `control_answers` are the controls' answers before the edit.
pub fn evaluate_update<S: Scalar>(
    model: &Seq2SeqModel<S>,
    op: &SurgeryOp,
    question: &[usize],
    controls: &[Vec<usize>],
    control_answers: &[Vec<usize>],
) -> Result<SurgeryOutcome> {
    if controls.len() != control_answers.len() {
        return Err(Error::contract("one recorded answer per control"));
    }
    if controls.iter().any(|c| c == question) {
        return Err(Error::contract("controls must not contain the edited question"));
    }
    let mut edited = model.clone();
    apply_surgery(&mut edited, op)?;
    let mut batch = Vec::with_capacity(controls.len() + 1);
    batch.push(question.to_vec());
    batch.extend(controls.iter().cloned());
    let after: Vec<Vec<usize>> = edited
        .greedy_decode_prompted(&batch, &QA_PROMPT, ANSWER_LEN)?
        .into_iter()
        .map(|d| d.tokens)
        .collect();
    Ok(SurgeryOutcome {
        success: after[0] == [op.target],
        destroyed: after[1..]
            .iter()
            .zip(control_answers)
            .filter(|(a, b)| a != b)
            .count(),
        controls: controls.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub successes: usize,
    pub edits: usize,
    pub destroyed: usize,
    pub controls: usize,
}

impl SweepRow {
    pub fn success_rate(&self) -> f64 {
        100.0 * self.successes as f64 / self.edits.max(1) as f64
    }

    pub fn destruction_rate(&self) -> f64 {
        100.0 * self.destroyed as f64 / self.controls.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Per edit and λ, in `(edit id, λ index)` order.
    pub outcomes: Vec<(usize, f64, SurgeryOutcome)>,
}

impl fmt::Display for SweepResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8}{:>10}{:>14}", "lambda", "success%", "destruction%")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<8}{:>10.1}{:>14.1}",
                r.lambda,
                r.success_rate(),
                r.destruction_rate()
            )?;
        }
        Ok(())
    }
}

/// Seeded controls for an edit: `n` questions of `pool` drawn without
/// replacement, never the edited question itself.
pub fn sample_controls(pool: &[Vec<usize>], question: &[usize], n: usize, seed: u64, edit: usize) -> Vec<usize> {
    let eligible: Vec<usize> = (0..pool.len()).filter(|&i| pool[i] != question).collect();
    let n = n.min(eligible.len());
    let mut rng = rng_for(seed, &format!("controls-{edit}"));
    let mut picked: Vec<usize> = sample(&mut rng, eligible.len(), n).into_iter().map(|i| eligible[i]).collect();
    picked.sort_unstable();
    picked
}

/// Every edit at every λ, each on a fresh copy of `model`.
pub fn sweep_lambda<S: Scalar>(
    model: &Seq2SeqModel<S>,
    cases: &[EditCase],
    grid: &[f64],
    control_pool: &[Vec<usize>],
    controls_per_edit: usize,
    seed: u64,
    threads: usize,
) -> Result<SweepResult> {
    if cases.is_empty() {
        return Err(Error::contract("surgery sweep over an empty edit set"));
    }
    let pool_answers = answer_all(model, control_pool, threads)?;
    let jobs: Vec<(usize, usize)> = (0..cases.len())
        .flat_map(|e| (0..grid.len()).map(move |l| (e, l)))
        .collect();
    let controls: Vec<Vec<usize>> = cases
        .iter()
        .map(|c| sample_controls(control_pool, &c.question, controls_per_edit, seed, c.id))
        .collect();
    let outcomes = crate::par::map_chunks(&jobs, 1, threads, |chunk| {
        chunk
            .iter()
            .map(|&(e, l)| {
                let case = &cases[e];
                let qs: Vec<Vec<usize>> = controls[e].iter().map(|&i| control_pool[i].clone()).collect();
                let before: Vec<Vec<usize>> = controls[e].iter().map(|&i| pool_answers[i].clone()).collect();
                let out = evaluate_update(model, &case.op(grid[l]), &case.question, &qs, &before)?;
                Ok((case.id, grid[l], out))
            })
            .collect()
    })?;
    let rows = grid
        .iter()
        .map(|&lambda| {
            let at: Vec<&SurgeryOutcome> = outcomes
                .iter()
                .filter(|(_, l, _)| *l == lambda)
                .map(|(_, _, o)| o)
                .collect();
            SweepRow {
                lambda,
                successes: at.iter().filter(|o| o.success).count(),
                edits: at.len(),
                destroyed: at.iter().map(|o| o.destroyed).sum(),
                controls: at.iter().map(|o| o.controls).sum(),
            }
        })
        .collect();
    Ok(SweepResult { rows, outcomes })
}

/// Names and row indices of every parameter entry that differs between two
/// models of the same shape.
pub fn changed_rows<S: Scalar>(a: &Seq2SeqModel<S>, b: &Seq2SeqModel<S>) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    for ((name, x), (_, y)) in a.named_params().into_iter().zip(b.named_params()) {
        let cols = x.shape().last().copied().unwrap_or(1).max(1);
        let mut row_counts: std::collections::BTreeMap<usize, usize> = Default::default();
        for (i, (p, q)) in x.data().iter().zip(y.data()).enumerate() {
            if p.as_f64().to_bits() != q.as_f64().to_bits() {
                *row_counts.entry(i / cols).or_insert(0) += 1;
            }
        }
        out.extend(row_counts.into_iter().map(|(r, n)| (name.clone(), r, n)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_slot() {
        assert_eq!(select_target_slot(&[0.0, 3.0, 1.0]).unwrap(), 1);
        assert_eq!(select_target_slot(&[2.0, 2.0]).unwrap(), 0);
        let w = [0.5, 0.1, 0.7, 0.7];
        let scaled: Vec<f64> = w.iter().map(|x| x * 13.0).collect();
        assert_eq!(select_target_slot(&w).unwrap(), select_target_slot(&scaled).unwrap());
        let err = select_target_slot(&[0.0f64; 4]).unwrap_err();
        assert!(err.to_string().contains("no active slot"));
    }

    #[test]
    fn op_validation() {
        let op = SurgeryOp {
            slot: 2,
            lambda: 0.1,
            original: 5,
            target: 5,
        };
        assert!(op.validate(4, 10).is_err());
        assert!(SurgeryOp { target: 6, ..op }.validate(4, 10).is_ok());
        assert!(SurgeryOp { target: 6, slot: 4, ..op }.validate(4, 10).is_err());
    }

    #[test]
    fn edit_specs_round_trip() {
        let specs = vec![
            EditSpec {
                question_id: 7,
                target: "Norway".into(),
            },
            EditSpec {
                question_id: 512,
                target: "1874".into(),
            },
        ];
        let mut buf = Vec::new();
        write_edit_specs(&mut buf, &specs).unwrap();
        assert_eq!(read_edit_specs(buf.as_slice()).unwrap(), specs);
        assert!(read_edit_specs("x\tNorway\n".as_bytes()).is_err());
        assert!(read_edit_specs("3 Norway\n".as_bytes()).is_err());
    }

    #[test]
    fn controls_exclude_question_and_are_seeded() {
        let pool: Vec<Vec<usize>> = (0..20).map(|i| vec![i]).collect();
        let c = sample_controls(&pool, &[4], 5, 1, 0);
        assert_eq!(c.len(), 5);
        assert!(!c.contains(&4));
        assert_eq!(c, sample_controls(&pool, &[4], 5, 1, 0));
        let mut d = c.clone();
        d.dedup();
        assert_eq!(d.len(), 5);
    }
}
