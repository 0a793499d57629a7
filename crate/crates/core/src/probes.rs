// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interpretability probes over a mounted knowledge bank.
//!
//! Value vectors are read through the output embedding as vocabulary
//! distributions; key vectors are read through the questions that excite them
//! most at the first answer token.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::factworld::{Category, QaPair, Vocab, World};
use crate::model::Seq2SeqModel;
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::QA_PROMPT;

/// Questions decoded per batch when recording triggers.
const TRIGGER_BATCH: usize = 64;

/// `Softmax(E·v)` over the full vocabulary, accumulated in f64.
pub fn project_value<S: Scalar>(v: &[S], embedding: &Tensor<S>) -> Result<Vec<f64>> {
    if embedding.cols() != v.len() {
        return Err(Error::contract(format!(
            "value of width {} against embedding of width {}",
            v.len(),
            embedding.cols()
        )));
    }
    let logits: Vec<f64> = (0..embedding.rows())
        .map(|r| {
            embedding
                .row(r)
                .iter()
                .zip(v)
                .map(|(&e, &x)| e.as_f64() * x.as_f64())
                .sum()
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Token ids sorted by probability, highest first; ties by lower id.
fn ranked(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueReport {
    pub slot: usize,
    /// `(token id, probability)`, probability descending.
    pub top: Vec<(usize, f64)>,
    pub top_word: String,
    /// Category of the top token's entity, `None` for non-entity tokens.
    pub category: Option<Category>,
    /// The distribution is flat (for example a zero value vector).
    pub degenerate: bool,
    /// Sum of the full distribution.
    pub mass: f64,
}

impl ValueReport {
    pub fn category_name(&self) -> &'static str {
        self.category.map_or("Non-entity", Category::name)
    }
}

impl fmt::Display for ValueReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "slot={} top={} category={} degenerate={} p=",
            self.slot,
            self.top_word,
            self.category_name(),
            self.degenerate
        )?;
        let probs: Vec<String> = self.top.iter().map(|(t, p)| format!("{t}:{p:.6}")).collect();
        write!(f, "{}", probs.join(","))
    }
}

/// Projects the value vectors of `slots` and labels each top token with its
/// entity category from `world`.
pub fn top_scoring_report<S: Scalar>(
    model: &Seq2SeqModel<S>,
    vocab: &Vocab,
    world: &World,
    k: usize,
    slots: &[usize],
) -> Result<Vec<ValueReport>> {
    let nkb = model.nkb()?;
    let categories: HashMap<&str, Category> = world
        .entities
        .iter()
        .map(|e| (e.surface.as_str(), e.category))
        .collect();
    let embedding = &model.embedding;
    slots
        .iter()
        .map(|&slot| {
            if slot >= nkb.slots() {
                return Err(Error::contract(format!(
                    "slot {slot} out of range for {} slots",
                    nkb.slots()
                )));
            }
            let p = project_value(nkb.value(slot), embedding)?;
            let order = ranked(&p);
            let best = order[0];
            let worst = order[order.len() - 1];
            let top_word = vocab.word(best).unwrap_or("?").to_string();
            Ok(ValueReport {
                slot,
                top: order.iter().take(k).map(|&t| (t, p[t])).collect(),
                category: categories.get(top_word.as_str()).copied(),
                top_word,
                degenerate: p[best] - p[worst] <= 1e-12,
                mass: p.iter().sum(),
            })
        })
        .collect()
}

/// Count of reports per category name, plus `Non-entity`.
pub fn category_histogram(reports: &[ValueReport]) -> BTreeMap<&'static str, usize> {
    let mut h = BTreeMap::new();
    for r in reports {
        *h.entry(r.category_name()).or_insert(0) += 1;
    }
    h
}

/// Fraction of reports whose top token is an entity.
pub fn entity_fraction(reports: &[ValueReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().filter(|r| r.category.is_some()).count() as f64 / reports.len() as f64
}

/// Bank weights `w′` recorded while each question's first answer token is
/// generated: one row per question, one column per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerMatrix {
    pub fact_ids: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    /// FFN input at the bank site for the same position.
    pub inputs: Vec<Vec<f64>>,
}

impl TriggerMatrix {
    pub fn questions(&self) -> usize {
        self.weights.len()
    }

    pub fn slots(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn column(&self, slot: usize) -> Vec<f64> {
        self.weights.iter().map(|r| r[slot]).collect()
    }

    /// Mean weight per slot over all questions.
    pub fn usage(&self) -> Vec<f64> {
        let n = self.questions().max(1) as f64;
        (0..self.slots())
            .map(|s| self.weights.iter().map(|r| r[s]).sum::<f64>() / n)
            .collect()
    }

    /// Each column permuted independently: keeps every slot's weight
    /// distribution but breaks its link to particular questions.
    pub fn column_shuffled(&self, seed: u64) -> Self {
        let mut out = self.clone();
        for s in 0..self.slots() {
            let mut col = self.column(s);
            col.shuffle(&mut rng_for(seed, &format!("shuffle-{s}")));
            for (row, x) in out.weights.iter_mut().zip(col) {
                row[s] = x;
            }
        }
        out
    }
}

/// Decodes each question with the QA prompt and records `w′` at the first
/// answer token.
pub fn build_trigger_matrix<S: Scalar>(
    model: &Seq2SeqModel<S>,
    vocab: &Vocab,
    pairs: &[QaPair],
    threads: usize,
) -> Result<TriggerMatrix> {
    if !model.is_mounted() {
        return Err(Error::contract("probing requires a mounted knowledge bank"));
    }
    if pairs.is_empty() {
        return Err(Error::contract("trigger matrix over an empty question set"));
    }
    let sources: Vec<Vec<usize>> = pairs
        .iter()
        .map(|p| vocab.encode(&p.question))
        .collect::<Result<_>>()?;
    let rows = crate::par::map_chunks(&sources, TRIGGER_BATCH, threads, |chunk| {
        model
            .greedy_decode_prompted(chunk, &QA_PROMPT, 1)?
            .into_iter()
            .map(|d| {
                let w = d.trace.weights.first().ok_or_else(|| Error::contract("empty trace"))?;
                let h = &d.trace.inputs[0];
                Ok((
                    w.iter().map(|x| x.as_f64()).collect::<Vec<f64>>(),
                    h.iter().map(|x| x.as_f64()).collect::<Vec<f64>>(),
                ))
            })
            .collect()
    })?;
    let (weights, inputs) = rows.into_iter().unzip();
    Ok(TriggerMatrix {
        fact_ids: pairs.iter().map(|p| p.fact_id).collect(),
        weights,
        inputs,
    })
}

/// How slots are chosen for value reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotRanking {
    /// Highest mean `w′` first; ties by lower index.
    Usage,
    /// Seeded uniform order.
    Random(u64),
}

pub fn rank_slots(matrix: &TriggerMatrix, ranking: SlotRanking) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..matrix.slots()).collect();
    match ranking {
        SlotRanking::Usage => {
            let u = matrix.usage();
            idx.sort_by(|&a, &b| u[b].total_cmp(&u[a]).then(a.cmp(&b)));
        }
        SlotRanking::Random(seed) => idx.shuffle(&mut rng_for(seed, "slot-sample")),
    }
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trigger {
    /// Row of the trigger matrix.
    pub question: usize,
    pub fact_id: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyReport {
    pub key: usize,
    /// Weight descending; ties by lower question index.
    pub triggers: Vec<Trigger>,
    /// Fewer than the requested number of questions were available.
    pub truncated: bool,
}

impl fmt::Display for KeyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "key={} truncated={} triggers=", self.key, self.truncated)?;
        let t: Vec<String> = self
            .triggers
            .iter()
            .map(|t| format!("{}:{:.6}", t.fact_id, t.weight))
            .collect();
        write!(f, "{}", t.join(","))
    }
}

/// The `m` questions with the highest weight on `key`.
pub fn top_triggering(matrix: &TriggerMatrix, key: usize, m: usize) -> Result<KeyReport> {
    if key >= matrix.slots() {
        return Err(Error::contract(format!(
            "key {key} out of range for {} slots",
            matrix.slots()
        )));
    }
    let col = matrix.column(key);
    let mut idx: Vec<usize> = (0..col.len()).collect();
    // Partial selection keeps this linear in the number of questions.
    let take = m.min(idx.len());
    let cmp = |a: &usize, b: &usize| col[*b].total_cmp(&col[*a]).then(a.cmp(b));
    if take > 0 && take < idx.len() {
        idx.select_nth_unstable_by(take - 1, cmp);
    }
    idx.truncate(take);
    idx.sort_by(cmp);
    Ok(KeyReport {
        key,
        triggers: idx
            .into_iter()
            .map(|q| Trigger {
                question: q,
                fact_id: matrix.fact_ids[q],
                weight: col[q],
            })
            .collect(),
        truncated: take < m,
    })
}

/// Share of a report's questions that ask the most common relation.
pub fn pattern_cohesion(report: &KeyReport, world: &World) -> Result<f64> {
    if report.triggers.is_empty() {
        return Ok(0.0);
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for t in &report.triggers {
        let fact = world
            .fact(t.fact_id)
            .ok_or_else(|| Error::data(format!("unknown fact id {}", t.fact_id)))?;
        *counts.entry(fact.relation).or_insert(0) += 1;
    }
    let largest = counts.values().copied().max().unwrap_or(0);
    Ok(largest as f64 / report.triggers.len() as f64)
}

/// Keys with at least `m` strictly positive entries.
pub fn active_keys(matrix: &TriggerMatrix, m: usize) -> Vec<usize> {
    (0..matrix.slots())
        .filter(|&s| matrix.weights.iter().filter(|r| r[s] > 0.0).count() >= m.max(1))
        .collect()
}

/// Mean cohesion of the top-`m` triggers over `keys`.
pub fn mean_cohesion(matrix: &TriggerMatrix, world: &World, keys: &[usize], m: usize) -> Result<f64> {
    if keys.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &k in keys {
        total += pattern_cohesion(&top_triggering(matrix, k, m)?, world)?;
    }
    Ok(total / keys.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factworld::{generate_world, FactTriple, WorldConfig};

    #[test]
    fn zero_value_projects_to_uniform() {
        let e = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[-1.0, 0.5], &[0.0, 3.0]]);
        let p = project_value(&[0.0, 0.0], &e).unwrap();
        for x in &p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn scaled_embedding_row_wins() {
        let e = Tensor::<f64>::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let v = [0.0, 40.0, 0.0];
        let p = project_value(&v, &e).unwrap();
        assert_eq!(ranked(&p)[0], 1);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranked_breaks_ties_by_id() {
        assert_eq!(ranked(&[0.2, 0.4, 0.4]), vec![1, 2, 0]);
    }

    fn matrix(cols: &[&[f64]]) -> TriggerMatrix {
        let n = cols[0].len();
        TriggerMatrix {
            fact_ids: (0..n).collect(),
            weights: (0..n).map(|q| cols.iter().map(|c| c[q]).collect()).collect(),
            inputs: vec![Vec::new(); n],
        }
    }

    #[test]
    fn single_nonzero_entry_comes_first() {
        let m = matrix(&[&[0.0, 0.0, 2.5, 0.0]]);
        let r = top_triggering(&m, 0, 5).unwrap();
        assert_eq!(r.triggers[0].question, 2);
        assert!(r.triggers[0].weight > 0.0);
        assert!(r.truncated);
        assert_eq!(r.triggers.len(), 4);
    }

    #[test]
    fn ties_go_to_lower_question() {
        let m = matrix(&[&[1.0, 3.0, 3.0, 1.0, 0.5]]);
        let q: Vec<usize> = top_triggering(&m, 0, 3).unwrap().triggers.iter().map(|t| t.question).collect();
        assert_eq!(q, vec![1, 2, 0]);
        assert!(top_triggering(&m, 1, 3).is_err());
    }

    fn world_with_relations(rels: &[usize]) -> World {
        let mut w = generate_world(&WorldConfig::default()).unwrap();
        w.base_facts = rels
            .iter()
            .enumerate()
            .map(|(id, &relation)| FactTriple {
                id,
                subject: 0,
                relation,
                object: 1,
            })
            .collect();
        w.new_facts.clear();
        w.withheld_facts.clear();
        w
    }

    #[test]
    fn cohesion_definition() {
        let report = |ids: &[usize]| KeyReport {
            key: 0,
            triggers: ids
                .iter()
                .map(|&i| Trigger {
                    question: i,
                    fact_id: i,
                    weight: 1.0,
                })
                .collect(),
            truncated: false,
        };
        let same = world_with_relations(&[4, 4, 4, 4, 4]);
        assert_eq!(pattern_cohesion(&report(&[0, 1, 2, 3, 4]), &same).unwrap(), 1.0);
        let distinct = world_with_relations(&[0, 1, 2, 3, 4]);
        assert!((pattern_cohesion(&report(&[0, 1, 2, 3, 4]), &distinct).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn shuffle_keeps_column_multisets() {
        let m = matrix(&[&[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0, 5.0, 1.0]]);
        let s = m.column_shuffled(9);
        for c in 0..2 {
            let mut a = m.column(c);
            let mut b = s.column(c);
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
        assert_eq!(s, m.column_shuffled(9));
    }

    #[test]
    fn usage_ranking() {
        let m = matrix(&[&[1.0, 1.0], &[3.0, 0.0], &[1.0, 1.0]]);
        assert_eq!(rank_slots(&m, SlotRanking::Usage), vec![1, 0, 2]);
        let mut r = rank_slots(&m, SlotRanking::Random(4));
        r.sort();
        assert_eq!(r, vec![0, 1, 2]);
        assert_eq!(active_keys(&m, 2), vec![0, 2]);
    }
}
