// SPDX-License-Identifier: MIT OR Apache-2.0

use super::data::{copy_task, ProxyTask, QA_PROMPT};
use crate::error::{Error, Result};
use crate::factworld::{QaPair, Vocab, MAX_ANSWER_TOKENS, SPECIAL_TOKENS};
use crate::model::Seq2SeqModel;
use crate::scalar::Scalar;

/// Sources decoded per batch.
const DECODE_BATCH: usize = 64;

/// Anything that can answer token sequences greedily.
pub trait QaModel: Sync {
    fn answer_batch(&self, sources: &[Vec<usize>], prompt: &[usize], max_len: usize) -> Result<Vec<Vec<usize>>>;
}

impl<S: Scalar> QaModel for Seq2SeqModel<S> {
    fn answer_batch(&self, sources: &[Vec<usize>], prompt: &[usize], max_len: usize) -> Result<Vec<Vec<usize>>> {
        Ok(self
            .greedy_decode_prompted(sources, prompt, max_len)?
            .into_iter()
            .map(|d| d.tokens)
            .collect())
    }
}

/// Decodes all sources in chunks, spread over up to `threads` workers. The
/// output order matches `sources` whatever the thread count.
fn decode_all<M: QaModel>(
    model: &M,
    sources: &[Vec<usize>],
    prompt: &[usize],
    max_len: usize,
    threads: usize,
) -> Result<Vec<Vec<usize>>> {
    crate::par::map_chunks(sources, DECODE_BATCH, threads, |c| model.answer_batch(c, prompt, max_len))
}

/// Lowercases, drops special tokens and collapses whitespace.
pub fn normalize_answer<T: AsRef<str>>(tokens: &[T]) -> String {
    tokens
        .iter()
        .flat_map(|t| t.as_ref().split_whitespace())
        .filter(|t| !SPECIAL_TOKENS.contains(t))
        .map(|t| t.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmReport {
    pub correct: usize,
    pub total: usize,
    /// Decoded answer per question, as words.
    pub predictions: Vec<Vec<String>>,
    pub hits: Vec<bool>,
}

impl EmReport {
    pub fn em(&self) -> f64 {
        100.0 * self.correct as f64 / self.total as f64
    }
}

/// Greedy closed-book answers scored by exact match after normalization.
pub fn evaluate_em<M: QaModel>(model: &M, vocab: &Vocab, pairs: &[QaPair], threads: usize) -> Result<EmReport> {
    if pairs.is_empty() {
        return Err(Error::contract("exact match over an empty question set"));
    }
    let sources: Vec<Vec<usize>> = pairs
        .iter()
        .map(|p| vocab.encode(&p.question))
        .collect::<Result<_>>()?;
    let decoded = decode_all(model, &sources, &QA_PROMPT, MAX_ANSWER_TOKENS + 1, threads)?;
    let mut predictions = Vec::with_capacity(pairs.len());
    let mut hits = Vec::with_capacity(pairs.len());
    for (pair, ids) in pairs.iter().zip(decoded) {
        let words = vocab.decode(&ids)?;
        hits.push(normalize_answer(&words) == normalize_answer(&pair.answer));
        predictions.push(words);
    }
    Ok(EmReport {
        correct: hits.iter().filter(|&&h| h).count(),
        total: pairs.len(),
        predictions,
        hits,
    })
}

/// Longest proxy sequence.
pub const PROXY_MAX_LEN: usize = 8;

/// Percentage of `n` fresh proxy sequences reproduced (or reversed) exactly.
pub fn proxy_lm_eval<M: QaModel>(
    model: &M,
    task: ProxyTask,
    n: usize,
    vocab_size: usize,
    seed: u64,
    threads: usize,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::contract("proxy evaluation needs at least one sequence"));
    }
    let examples = copy_task(task, n, PROXY_MAX_LEN, vocab_size, seed);
    let sources: Vec<Vec<usize>> = examples.iter().map(|e| e.source.clone()).collect();
    let decoded = decode_all(model, &sources, &[], PROXY_MAX_LEN + 1, threads)?;
    let correct = examples
        .iter()
        .zip(&decoded)
        .filter(|(e, d)| e.decoder_input[1..] == d[..])
        .count();
    Ok(100.0 * correct as f64 / n as f64)
}
