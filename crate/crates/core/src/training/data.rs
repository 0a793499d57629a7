// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::factworld::{mask_span, QaPair, Span, Statement, Vocab};
use crate::model::special;
use crate::rng::{rng_for, LabRng};

/// Decoder tokens forced after the begin token when answering a question, so
/// answers are produced at the same decoder position as masked spans.
pub const QA_PROMPT: [usize; 1] = [special::SENTINEL];

/// A teacher-forced training pair. `labels[i]` is the target at decoder
/// position `i`; [`special::PAD`] positions carry no loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<usize>,
    pub decoder_input: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Example {
    /// Decoder reads `[BOS] + target` and predicts `target + [EOS]`.
    pub fn seq2seq(source: Vec<usize>, target: &[usize]) -> Self {
        let mut decoder_input = vec![special::BOS];
        decoder_input.extend_from_slice(target);
        let mut labels = target.to_vec();
        labels.push(special::EOS);
        Self {
            source,
            decoder_input,
            labels,
        }
    }

    /// Decoder reads `[BOS] + QA_PROMPT + answer`; the prompt positions
    /// carry no loss.
    pub fn qa(question: Vec<usize>, answer: &[usize]) -> Self {
        let mut decoder_input = vec![special::BOS];
        decoder_input.extend_from_slice(&QA_PROMPT);
        decoder_input.extend_from_slice(answer);
        let mut labels = vec![special::PAD; QA_PROMPT.len()];
        labels.extend_from_slice(answer);
        labels.push(special::EOS);
        Self {
            source: question,
            decoder_input,
            labels,
        }
    }

    pub fn from_qa(vocab: &Vocab, pair: &QaPair) -> Result<Self> {
        Ok(Self::qa(vocab.encode(&pair.question)?, &vocab.encode(&pair.answer)?))
    }
}

/// A training item; masked-span items are re-masked every time they are drawn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Sample {
    Ssm { tokens: Vec<usize>, spans: Vec<Span> },
    Fixed(Example),
}

impl Sample {
    pub fn ssm(vocab: &Vocab, statement: &Statement) -> Result<Self> {
        if statement.spans.is_empty() {
            return Err(Error::data(format!(
                "statement for fact {} has no salient span",
                statement.fact_id
            )));
        }
        Ok(Sample::Ssm {
            tokens: vocab.encode(&statement.tokens)?,
            spans: statement.spans.clone(),
        })
    }

    pub fn realize<R: Rng + ?Sized>(&self, rng: &mut R) -> Example {
        match self {
            Sample::Ssm { tokens, spans } => {
                let (input, target, _) =
                    mask_span(tokens, spans, special::SENTINEL, rng).expect("spans checked at construction");
                Example::seq2seq(input, &target)
            }
            Sample::Fixed(e) => e.clone(),
        }
    }
}

/// Epoch-shuffled batches. The order is a pure function of `(seed, step)` so
/// a run can resume at any step.
pub struct Batcher {
    samples: Vec<Sample>,
    batch_size: usize,
    seed: u64,
    cached_epoch: Option<(usize, Vec<usize>)>,
}

impl Batcher {
    pub fn new(samples: Vec<Sample>, batch_size: usize, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::data("empty training set"));
        }
        if batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(Self {
            samples,
            batch_size,
            seed,
            cached_epoch: None,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    fn permutation(&mut self, epoch: usize) -> &[usize] {
        if self.cached_epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.samples.len()).collect();
            let mut rng: LabRng = rng_for(self.seed, &format!("epoch-{epoch}"));
            perm.shuffle(&mut rng);
            self.cached_epoch = Some((epoch, perm));
        }
        &self.cached_epoch.as_ref().expect("just filled").1
    }

    /// Sample indices of the batch for 0-based `step`.
    pub fn indices(&mut self, step: usize) -> Vec<usize> {
        let n = self.samples.len();
        (step * self.batch_size..(step + 1) * self.batch_size)
            .map(|j| self.permutation(j / n)[j % n])
            .collect()
    }

    pub fn batch<R: Rng + ?Sized>(&mut self, step: usize, rng: &mut R) -> Vec<Example> {
        self.indices(step)
            .into_iter()
            .map(|i| self.samples[i].realize(rng))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxyTask {
    Copy,
    Reverse,
}

impl fmt::Display for ProxyTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProxyTask::Copy => "copy",
            ProxyTask::Reverse => "reverse",
        })
    }
}

impl FromStr for ProxyTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "copy" => Ok(ProxyTask::Copy),
            "reverse" => Ok(ProxyTask::Reverse),
            _ => Err(format!("unknown proxy task {s:?}")),
        }
    }
}

/// `n` random sequences of 1..=`max_len` ordinary tokens (ids from
/// [`special::COUNT`] up to `vocab_size`) paired with their copy or reversal.
pub fn copy_task(task: ProxyTask, n: usize, max_len: usize, vocab_size: usize, seed: u64) -> Vec<Example> {
    let mut rng: LabRng = rng_for(seed, &format!("proxy-{task}"));
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            let src: Vec<usize> = (0..len)
                .map(|_| rng.random_range(special::COUNT..vocab_size))
                .collect();
            let mut tgt = src.clone();
            if task == ProxyTask::Reverse {
                tgt.reverse();
            }
            Example::seq2seq(src, &tgt)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factworld::Category;

    #[test]
    fn qa_example_masks_prompt_positions() {
        let e = Example::qa(vec![9, 10], &[12]);
        assert_eq!(e.decoder_input, vec![special::BOS, special::SENTINEL, 12]);
        assert_eq!(e.labels, vec![special::PAD, 12, special::EOS]);
    }

    #[test]
    fn ssm_example_shapes() {
        let s = Sample::Ssm {
            tokens: vec![10, 11, 12, 13],
            spans: vec![Span { start: 2, len: 1, category: Category::Place }],
        };
        let e = s.realize(&mut rng_for(0, "t"));
        assert_eq!(e.source, vec![10, 11, special::SENTINEL, 13]);
        assert_eq!(e.decoder_input, vec![special::BOS, special::SENTINEL, 12]);
        assert_eq!(e.labels, vec![special::SENTINEL, 12, special::EOS]);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let samples = (0..10)
            .map(|i| Sample::Fixed(Example::seq2seq(vec![i + 4], &[i + 4])))
            .collect();
        let mut b = Batcher::new(samples, 5, 3).unwrap();
        let mut first: Vec<usize> = b.indices(0).into_iter().chain(b.indices(1)).collect();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let again = b.indices(0);
        let mut fresh = Batcher::new(b.samples().to_vec(), 5, 3).unwrap();
        assert_eq!(fresh.indices(0), again);
        assert_ne!(b.indices(2), b.indices(0));
    }

    #[test]
    fn proxy_targets() {
        for e in copy_task(ProxyTask::Reverse, 20, 8, 30, 1) {
            let mut rev = e.source.clone();
            rev.reverse();
            assert_eq!(&e.decoder_input[1..], rev.as_slice());
            assert!(e.source.iter().all(|&t| (special::COUNT..30).contains(&t)));
            assert!((1..=8).contains(&e.source.len()));
        }
    }
}
