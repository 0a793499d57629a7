// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};
use crate::rng::LabRng;
use crate::scalar::Scalar;
use crate::tape::{AttentionLayout, Segment, Tape, Var};
use crate::tensor::Tensor;

use super::{special, NkbSite, Seq2SeqModel, Stack};

/// Dropout applied to sublayer outputs during training. The knowledge bank's
/// contribution has its own rate.
pub struct Dropout {
    pub rate: f64,
    pub nkb_rate: f64,
    pub rng: LabRng,
}

#[derive(Clone, Copy)]
struct BoundAttn {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
}

#[derive(Clone, Copy)]
struct BoundFfn {
    w1: Var,
    w2: Var,
}

struct BoundEncoder {
    ln_attn: Var,
    attn: BoundAttn,
    ln_ffn: Var,
    ffn: BoundFfn,
}

struct BoundDecoder {
    ln_self: Var,
    self_attn: BoundAttn,
    ln_cross: Var,
    cross_attn: BoundAttn,
    ln_ffn: Var,
    ffn: BoundFfn,
}

/// Model parameters registered on a tape.
pub struct Bound {
    /// One variable per parameter, in [`Seq2SeqModel::named_params`] order.
    pub vars: Vec<Var>,
    embedding: Var,
    encoder: Vec<BoundEncoder>,
    encoder_norm: Var,
    decoder: Vec<BoundDecoder>,
    nkb: Option<BoundFfn>,
}

/// Outputs of a batched teacher-forced pass; rows of `logits` follow the packed
/// decoder inputs.
pub struct ForwardPass {
    pub logits: Var,
    /// Post-activation knowledge-bank weights `w′`, one row per position of the
    /// stack hosting the bank; `None` when unmounted.
    pub nkb_weights: Option<Var>,
    /// Normalized FFN inputs at the bank's site, aligned with `nkb_weights`.
    pub nkb_inputs: Option<Var>,
    pub decoder_lengths: Vec<usize>,
    pub encoder_lengths: Vec<usize>,
}

/// Bank weights `w′` and the FFN input they were computed from.
#[derive(Clone, Copy, Debug)]
pub struct BankTap {
    pub weights: Var,
    pub input: Var,
}

/// Per-position record of the knowledge-bank weights `w′`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<S> {
    pub site: Option<NkbSite>,
    pub weights: Vec<Vec<S>>,
    /// FFN input at the bank's site for the same positions as `weights`.
    pub inputs: Vec<Vec<S>>,
}

impl<S> ForwardTrace<S> {
    fn unmounted() -> Self {
        Self {
            site: None,
            weights: Vec::new(),
            inputs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded<S> {
    /// Generated tokens, without the end token.
    pub tokens: Vec<usize>,
    /// One row per decoding step (including the step that emitted the end token).
    pub trace: ForwardTrace<S>,
    /// Next-token logits at every decoding step.
    pub step_logits: Vec<Vec<S>>,
}

/// Sinusoidal encoding: `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(..)`.
pub(crate) fn positional_row<S: Scalar>(pos: usize, d: usize, out: &mut Vec<S>) {
    for i in 0..d {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        out.push(S::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
    }
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

impl<S: Scalar> Seq2SeqModel<S> {
    /// Registers every parameter on `tape`; `trainable(name)` decides which
    /// ones receive gradients.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, S>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars: Vec<Var> = self
            .named_params()
            .into_iter()
            .map(|(name, t)| tape.leaf_ref(t, trainable(&name)))
            .collect();
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("parameter count mismatch");
        let embedding = next();
        let attn = |next: &mut dyn FnMut() -> Var| BoundAttn {
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
        };
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for _ in &self.encoder {
            encoder.push(BoundEncoder {
                ln_attn: next(),
                attn: attn(&mut next),
                ln_ffn: next(),
                ffn: BoundFfn {
                    w1: next(),
                    w2: next(),
                },
            });
        }
        let encoder_norm = next();
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for _ in &self.decoder {
            decoder.push(BoundDecoder {
                ln_self: next(),
                self_attn: attn(&mut next),
                ln_cross: next(),
                cross_attn: attn(&mut next),
                ln_ffn: next(),
                ffn: BoundFfn {
                    w1: next(),
                    w2: next(),
                },
            });
        }
        let nkb = self.nkb.as_ref().map(|_| BoundFfn {
            w1: next(),
            w2: next(),
        });
        Bound {
            vars,
            embedding,
            encoder,
            encoder_norm,
            decoder,
            nkb,
        }
    }

    fn check_lengths(&self, seqs: &[&[usize]], what: &str) -> Result<()> {
        for s in seqs {
            if s.is_empty() {
                return Err(Error::contract(format!("empty {what} sequence")));
            }
            if s.len() > self.config.max_seq_len {
                return Err(Error::contract(format!(
                    "{what} length {} exceeds max_seq_len {}",
                    s.len(),
                    self.config.max_seq_len
                )));
            }
        }
        Ok(())
    }

    /// `E[tokens]/σ + PE` for packed sequences, σ the embedding std.
    fn embed<'a>(&self, tape: &mut Tape<'a, S>, b: &Bound, seqs: &[&[usize]]) -> Result<Var> {
        let d = self.config.model_dim;
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let rows = tape.gather(b.embedding, &ids)?;
        let scaled = tape.scale(rows, S::lit(1.0 / self.config.embedding_std));
        let mut pe = Vec::with_capacity(ids.len() * d);
        for s in seqs {
            for pos in 0..s.len() {
                positional_row(pos, d, &mut pe);
            }
        }
        let pe = tape.constant(Tensor::matrix(ids.len(), d, pe)?);
        tape.add(scaled, pe)
    }

    fn attention_block<'a>(
        &self,
        tape: &mut Tape<'a, S>,
        p: BoundAttn,
        queries: Var,
        memory: Var,
        layout: AttentionLayout,
    ) -> Result<Var> {
        let q = tape.matmul(queries, p.wq)?;
        let k = tape.matmul(memory, p.wk)?;
        let v = tape.matmul(memory, p.wv)?;
        let heads = tape.attention(q, k, v, layout)?;
        tape.matmul(heads, p.wo)
    }

    /// `ActFunc(H·W1ᵀ)·W2`, plus the bank's `ActFunc(H·W1′ᵀ)·W2′` when given.
    fn ffn_block<'a>(
        &self,
        tape: &mut Tape<'a, S>,
        p: BoundFfn,
        nkb: Option<BoundFfn>,
        h: Var,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<(Var, Option<BankTap>)> {
        let act = self.config.activation;
        let scores = tape.matmul_bt(h, p.w1)?;
        let weights = tape.act(scores, act);
        let mut out = tape.matmul(weights, p.w2)?;
        if let Some(dr) = dropout.as_deref_mut() {
            out = tape.dropout(out, dr.rate, &mut dr.rng);
        }
        let Some(bank) = nkb else {
            return Ok((out, None));
        };
        let scores = tape.matmul_bt(h, bank.w1)?;
        let bank_weights = tape.act(scores, act);
        let mut extra = tape.matmul(bank_weights, bank.w2)?;
        if let Some(dr) = dropout.as_deref_mut() {
            extra = tape.dropout(extra, dr.nkb_rate, &mut dr.rng);
        }
        let tap = BankTap {
            weights: bank_weights,
            input: h,
        };
        Ok((tape.add(out, extra)?, Some(tap)))
    }

    fn residual_dropout<'a>(&self, tape: &mut Tape<'a, S>, x: Var, dropout: &mut Option<&mut Dropout>) -> Var {
        match dropout.as_deref_mut() {
            Some(dr) => tape.dropout(x, dr.rate, &mut dr.rng),
            None => x,
        }
    }

    fn site_bank(&self, b: &Bound, stack: Stack, layer: usize) -> Option<BoundFfn> {
        let site = self.config.nkb_site;
        (site.stack == stack && site.layer == layer).then_some(b.nkb).flatten()
    }

    /// Runs the encoder over packed sources; returns the normalized memory and,
    /// for an encoder-hosted bank, its weights.
    pub fn encode<'a>(
        &self,
        tape: &mut Tape<'a, S>,
        b: &Bound,
        sources: &[&[usize]],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<(Var, Option<BankTap>)> {
        self.check_lengths(sources, "source")?;
        let lengths: Vec<usize> = sources.iter().map(|s| s.len()).collect();
        let eps = S::lit(self.config.layer_norm_eps);
        let mut x = self.embed(tape, b, sources)?;
        let mut bank_weights = None;
        for (l, layer) in b.encoder.iter().enumerate() {
            let h = tape.layer_norm(x, layer.ln_attn, eps)?;
            let layout = AttentionLayout::packed(&lengths, self.config.num_heads, false);
            let a = self.attention_block(tape, layer.attn, h, h, layout)?;
            let a = self.residual_dropout(tape, a, &mut dropout);
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, layer.ln_ffn, eps)?;
            let bank = self.site_bank(b, Stack::Encoder, l);
            let (f, w) = self.ffn_block(tape, layer.ffn, bank, h, &mut dropout)?;
            bank_weights = bank_weights.or(w);
            x = tape.add(x, f)?;
        }
        Ok((tape.layer_norm(x, b.encoder_norm, eps)?, bank_weights))
    }

    /// Teacher-forced decoder pass. Decoder sequence `i` cross-attends to rows
    /// `memory_segments[i] = (start, len)` of `memory`.
    pub fn decode<'a>(
        &self,
        tape: &mut Tape<'a, S>,
        b: &Bound,
        memory: Var,
        memory_segments: &[(usize, usize)],
        decoder_inputs: &[&[usize]],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<(Var, Option<BankTap>)> {
        self.check_lengths(decoder_inputs, "decoder")?;
        if memory_segments.len() != decoder_inputs.len() {
            return Err(Error::contract("one memory segment per decoder sequence"));
        }
        let lengths: Vec<usize> = decoder_inputs.iter().map(|s| s.len()).collect();
        let mut q_start = 0;
        let cross_segments: Vec<Segment> = lengths
            .iter()
            .zip(memory_segments)
            .map(|(&len, &(k_start, k_len))| {
                let s = Segment {
                    q_start,
                    q_len: len,
                    k_start,
                    k_len,
                };
                q_start += len;
                s
            })
            .collect();
        let heads = self.config.num_heads;
        let eps = S::lit(self.config.layer_norm_eps);
        let mut y = self.embed(tape, b, decoder_inputs)?;
        let mut bank_weights = None;
        for (l, layer) in b.decoder.iter().enumerate() {
            let h = tape.layer_norm(y, layer.ln_self, eps)?;
            let layout = AttentionLayout::packed(&lengths, heads, true);
            let a = self.attention_block(tape, layer.self_attn, h, h, layout)?;
            let a = self.residual_dropout(tape, a, &mut dropout);
            y = tape.add(y, a)?;
            let h = tape.layer_norm(y, layer.ln_cross, eps)?;
            let layout = AttentionLayout {
                heads,
                causal: false,
                segments: cross_segments.clone(),
            };
            let c = self.attention_block(tape, layer.cross_attn, h, memory, layout)?;
            let c = self.residual_dropout(tape, c, &mut dropout);
            y = tape.add(y, c)?;
            let h = tape.layer_norm(y, layer.ln_ffn, eps)?;
            let bank = self.site_bank(b, Stack::Decoder, l);
            let (f, w) = self.ffn_block(tape, layer.ffn, bank, h, &mut dropout)?;
            bank_weights = bank_weights.or(w);
            y = tape.add(y, f)?;
        }
        let logits = tape.matmul_bt(y, b.embedding)?;
        Ok((logits, bank_weights))
    }

    /// Encoder and decoder over a batch of `(source, decoder input)` pairs.
    pub fn forward_batch<'a>(
        &self,
        tape: &mut Tape<'a, S>,
        b: &Bound,
        sources: &[&[usize]],
        decoder_inputs: &[&[usize]],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<ForwardPass> {
        if sources.len() != decoder_inputs.len() {
            return Err(Error::contract("sources and decoder inputs differ in count"));
        }
        let (memory, enc_w) = self.encode(tape, b, sources, dropout.as_deref_mut())?;
        let mut start = 0;
        let segments: Vec<(usize, usize)> = sources
            .iter()
            .map(|s| {
                let seg = (start, s.len());
                start += s.len();
                seg
            })
            .collect();
        let (logits, dec_w) = self.decode(tape, b, memory, &segments, decoder_inputs, dropout)?;
        Ok(ForwardPass {
            logits,
            nkb_weights: enc_w.or(dec_w).map(|t| t.weights),
            nkb_inputs: enc_w.or(dec_w).map(|t| t.input),
            decoder_lengths: decoder_inputs.iter().map(|s| s.len()).collect(),
            encoder_lengths: sources.iter().map(|s| s.len()).collect(),
        })
    }

    /// Teacher-forced logits for `[BOS] + prefix` given `src`: one row per
    /// decoder position (`prefix.len() + 1` rows).
    pub fn forward_seq2seq(&self, src: &[usize], prefix: &[usize]) -> Result<(Tensor<S>, ForwardTrace<S>)> {
        let mut dec = Vec::with_capacity(prefix.len() + 1);
        dec.push(special::BOS);
        dec.extend_from_slice(prefix);
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let pass = self.forward_batch(&mut tape, &b, &[src], &[&dec], None)?;
        let logits = tape.value(pass.logits).clone();
        let rows = |v: Var| {
            let t = tape.value(v);
            (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>()
        };
        let trace = match (pass.nkb_weights, pass.nkb_inputs) {
            (Some(w), Some(h)) => ForwardTrace {
                site: Some(self.config.nkb_site),
                weights: rows(w),
                inputs: rows(h),
            },
            _ => ForwardTrace::unmounted(),
        };
        Ok((logits, trace))
    }

    pub fn greedy_decode(&self, src: &[usize], max_len: usize) -> Result<Decoded<S>> {
        let mut out = self.greedy_decode_batch(&[src.to_vec()], max_len)?;
        Ok(out.pop().expect("one result per source"))
    }

    /// Argmax decoding (lowest id wins ties) until the end token or `max_len`
    /// generated tokens, for many sources at once.
    pub fn greedy_decode_batch(&self, sources: &[Vec<usize>], max_len: usize) -> Result<Vec<Decoded<S>>> {
        self.greedy_decode_prompted(sources, &[], max_len)
    }

    /// Like [`Self::greedy_decode_batch`], but every decoder starts from
    /// `[BOS] + prompt`. Prompt tokens are not part of the output; trace row 0
    /// is the position that reads the last prompt token.
    pub fn greedy_decode_prompted(
        &self,
        sources: &[Vec<usize>],
        prompt: &[usize],
        max_len: usize,
    ) -> Result<Vec<Decoded<S>>> {
        if sources.is_empty() {
            return Ok(Vec::new());
        }
        if prompt.len() + 1 >= self.config.max_seq_len {
            return Err(Error::contract("decoder prompt leaves no room to generate"));
        }
        let max_len = max_len.min(self.config.max_seq_len - 1 - prompt.len());
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let src_refs: Vec<&[usize]> = sources.iter().map(|s| s.as_slice()).collect();
        let (memory, enc_w) = self.encode(&mut tape, &b, &src_refs, None)?;
        let mut segments = Vec::with_capacity(sources.len());
        let mut start = 0;
        for s in sources {
            segments.push((start, s.len()));
            start += s.len();
        }
        let site = self.nkb.as_ref().map(|_| self.config.nkb_site);
        let mut results: Vec<Decoded<S>> = sources
            .iter()
            .map(|_| Decoded {
                tokens: Vec::new(),
                trace: ForwardTrace {
                    site,
                    weights: Vec::new(),
                    inputs: Vec::new(),
                },
                step_logits: Vec::new(),
            })
            .collect();
        let mut start_seq = vec![special::BOS];
        start_seq.extend_from_slice(prompt);
        let mut prefixes: Vec<Vec<usize>> = vec![start_seq; sources.len()];
        let mut active: Vec<usize> = (0..sources.len()).collect();
        let vocab = self.config.vocab_size;
        let mut step = 0;
        while !active.is_empty() && step < max_len {
            let dec_refs: Vec<&[usize]> = active.iter().map(|&i| prefixes[i].as_slice()).collect();
            let segs: Vec<(usize, usize)> = active.iter().map(|&i| segments[i]).collect();
            let (logits, dec_w) = self.decode(&mut tape, &b, memory, &segs, &dec_refs, None)?;
            let logits = tape.value(logits);
            let weights = dec_w.map(|t| (tape.value(t.weights), tape.value(t.input)));
            let mut still = Vec::with_capacity(active.len());
            let mut row_end = 0;
            for &i in &active {
                row_end += prefixes[i].len();
                let last = row_end - 1;
                let row = &logits.data()[last * vocab..(last + 1) * vocab];
                let next = argmax(row);
                let res = &mut results[i];
                res.step_logits.push(row.to_vec());
                if let Some((w, h)) = weights {
                    res.trace.weights.push(w.row(last).to_vec());
                    res.trace.inputs.push(h.row(last).to_vec());
                }
                if next == special::EOS {
                    continue;
                }
                res.tokens.push(next);
                prefixes[i].push(next);
                still.push(i);
            }
            active = still;
            step += 1;
        }
        if let (Some(tap), Some(site)) = (enc_w, site) {
            if site.stack == Stack::Encoder {
                let w = tape.value(tap.weights);
                let h = tape.value(tap.input);
                for (res, &(start, len)) in results.iter_mut().zip(&segments) {
                    res.trace.weights = (start..start + len).map(|r| w.row(r).to_vec()).collect();
                    res.trace.inputs = (start..start + len).map(|r| h.row(r).to_vec()).collect();
                }
            }
        }
        Ok(results)
    }
}
