// SPDX-License-Identifier: MIT OR Apache-2.0

//! Text header of `key=value` lines ending with `blocks=N`, then `N` blocks,
//! each a `name d1xd2` line followed by raw little-endian `f64` values.

use std::io::{BufRead, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;

use super::optim::OptimizerState;
use super::OptimizerKind;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Seq2SeqModel};
use crate::rng::LabRng;
use crate::scalar::{from_le_f64, to_le_f64, Scalar};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "nkb-checkpoint";

/// Exact position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &LabRng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> LabRng {
        let mut rng = LabRng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    fn encode(&self) -> String {
        format!("{}:{}:{}", hex::encode(self.seed), self.stream, self.word_pos)
    }

    fn decode(s: &str) -> Result<Self> {
        let bad = || Error::format(format!("bad rng state {s:?}"));
        let mut parts = s.split(':');
        let seed_hex = parts.next().ok_or_else(bad)?;
        let stream = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let word_pos = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let seed: [u8; 32] = hex::decode(seed_hex)
            .map_err(|_| bad())?
            .try_into()
            .map_err(|_| bad())?;
        Ok(Self { seed, stream, word_pos })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub model: Seq2SeqModel<S>,
    pub optimizer: Option<OptimizerState<S>>,
    /// Updates applied so far in the phase that wrote the checkpoint.
    pub step: u64,
    pub rng: Option<RngState>,
    /// Free-form provenance (phase name and the like); keys must not contain
    /// `=` and values must be single-line.
    pub meta: Vec<(String, String)>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(model: Seq2SeqModel<S>) -> Self {
        Self {
            model,
            optimizer: None,
            step: 0,
            rng: None,
            meta: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn write_block<W: Write, S: Scalar>(out: &mut W, name: &str, shape: &[usize], data: &[S]) -> Result<()> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    writeln!(out, "{name} {}", dims.join("x"))?;
    let mut buf = Vec::with_capacity(data.len() * 8);
    for &x in data {
        buf.extend_from_slice(&to_le_f64(x));
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn write_checkpoint<W: Write, S: Scalar>(out: &mut W, ckpt: &Checkpoint<S>) -> Result<()> {
    writeln!(out, "{MAGIC} version={FORMAT_VERSION}")?;
    for (k, v) in ckpt.model.config.to_kv() {
        writeln!(out, "model.{k}={v}")?;
    }
    writeln!(out, "step={}", ckpt.step)?;
    match &ckpt.rng {
        Some(r) => writeln!(out, "rng={}", r.encode())?,
        None => writeln!(out, "rng=none")?,
    }
    match &ckpt.optimizer {
        Some(o) => writeln!(out, "optimizer={} {}", o.kind, o.step)?,
        None => writeln!(out, "optimizer=none")?,
    }
    for (k, v) in &ckpt.meta {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::contract(format!("unwritable meta entry {k:?}")));
        }
        writeln!(out, "meta.{k}={v}")?;
    }
    let params = ckpt.model.named_params();
    let opt_blocks = ckpt.optimizer.as_ref().map(|o| o.blocks()).unwrap_or_default();
    writeln!(out, "blocks={}", params.len() + opt_blocks.len())?;
    for (name, t) in &params {
        write_block(out, name, t.shape(), t.data())?;
    }
    for (name, shape, data) in &opt_blocks {
        write_block(out, &format!("opt.{name}"), shape, data)?;
    }
    Ok(())
}

fn read_line<R: BufRead>(input: &mut R) -> Result<String> {
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Err(Error::format("unexpected end of checkpoint"));
    }
    Ok(line.trim_end_matches('\n').to_string())
}

pub fn read_checkpoint<R: BufRead, S: Scalar>(input: &mut R) -> Result<Checkpoint<S>> {
    let first = read_line(input)?;
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|r| r.trim().strip_prefix("version="))
        .ok_or_else(|| Error::format("not a checkpoint file"))?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::format(format!(
            "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let mut model_kv = Vec::new();
    let mut step = 0;
    let mut rng = None;
    let mut optimizer: Option<(OptimizerKind, u64)> = None;
    let mut meta = Vec::new();
    let n_blocks: usize;
    loop {
        let line = read_line(input)?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("bad header line {line:?}")))?;
        if let Some(mk) = k.strip_prefix("model.") {
            model_kv.push((mk.to_string(), v.to_string()));
        } else if let Some(mk) = k.strip_prefix("meta.") {
            meta.push((mk.to_string(), v.to_string()));
        } else {
            match k {
                "step" => step = v.parse().map_err(|_| Error::format("bad step"))?,
                "rng" => rng = if v == "none" { None } else { Some(RngState::decode(v)?) },
                "optimizer" => {
                    optimizer = if v == "none" {
                        None
                    } else {
                        let (kind, t) = v.split_once(' ').ok_or_else(|| Error::format("bad optimizer line"))?;
                        Some((
                            kind.parse().map_err(Error::Format)?,
                            t.parse().map_err(|_| Error::format("bad optimizer step"))?,
                        ))
                    }
                }
                "blocks" => {
                    n_blocks = v.parse().map_err(|_| Error::format("bad block count"))?;
                    break;
                }
                _ => return Err(Error::format(format!("unknown header key `{k}`"))),
            }
        }
    }
    let config = ModelConfig::from_kv(model_kv.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .map_err(|e| Error::format(format!("checkpoint model config: {e}")))?;
    let mut model = Seq2SeqModel::<S>::new(config, &mut LabRng::seed_from_u64(0))?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if n_blocks < expected.len() {
        return Err(Error::format(format!(
            "checkpoint has {n_blocks} blocks, model needs {}",
            expected.len()
        )));
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let line = read_line(input)?;
        let (name, dims) = line
            .rsplit_once(' ')
            .ok_or_else(|| Error::format(format!("bad block header {line:?}")))?;
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::format(format!("bad shape {dims:?}"))))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        input.read_exact(&mut raw).map_err(|_| Error::format(format!("truncated block `{name}`")))?;
        let data: Vec<S> = raw
            .chunks_exact(8)
            .map(|c| from_le_f64(c.try_into().expect("chunk of 8")))
            .collect();
        blocks.push((name.to_string(), shape, data));
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::format("trailing bytes after last block"));
    }
    let opt_blocks = blocks.split_off(expected.len());
    for (((name, shape, data), (want_name, want_shape)), param) in
        blocks.into_iter().zip(&expected).zip(model.params_mut())
    {
        if &name != want_name || &shape != want_shape {
            return Err(Error::format(format!(
                "block `{name}` {shape:?} where `{want_name}` {want_shape:?} was expected"
            )));
        }
        param.data_mut().copy_from_slice(&data);
    }
    let optimizer = match optimizer {
        Some((kind, t)) => {
            let mut named = Vec::with_capacity(opt_blocks.len());
            for (name, _, data) in opt_blocks {
                let inner = name
                    .strip_prefix("opt.")
                    .ok_or_else(|| Error::format(format!("unexpected block `{name}`")))?;
                named.push((inner.to_string(), data));
            }
            Some(OptimizerState::from_blocks(kind, t, named)?)
        }
        None if opt_blocks.is_empty() => None,
        None => return Err(Error::format("optimizer blocks without optimizer header")),
    };
    Ok(Checkpoint {
        model,
        optimizer,
        step,
        rng,
        meta,
    })
}

pub fn save_checkpoint<S: Scalar>(path: &Path, ckpt: &Checkpoint<S>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::format(format!("cannot open checkpoint {}: {e}", path.display())))?;
    read_checkpoint(&mut std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NkbSite;
    use crate::rng::rng_for;
    use crate::training::optim::ParamGroup;
    use rand::Rng;

    fn sample(nkb: usize) -> Checkpoint<f64> {
        let cfg = ModelConfig {
            num_layers: 1,
            model_dim: 4,
            num_heads: 2,
            nkb_dim: nkb,
            nkb_site: NkbSite::last_decoder(1),
            ..ModelConfig::desk(9)
        };
        let mut rng = rng_for(5, "ckpt");
        let mut model = Seq2SeqModel::new(cfg, &mut rng).unwrap();
        let tr = ParamGroup::trainable(&ParamGroup::split(&model, false, false), &model).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::Adam);
        let grads = model
            .named_params()
            .iter()
            .map(|(_, t)| Some((0..t.len()).map(|_| rng.random::<f64>() - 0.5).collect()))
            .collect();
        opt.step(&mut model, &tr, grads, 0.01, 1.0).unwrap();
        let _: u64 = rng.random();
        Checkpoint {
            model,
            optimizer: Some(opt),
            step: 1,
            rng: Some(RngState::capture(&rng)),
            meta: vec![("phase".into(), "pretrain".into())],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for nkb in [0, 3] {
            let ck = sample(nkb);
            let mut a = Vec::new();
            write_checkpoint(&mut a, &ck).unwrap();
            let back: Checkpoint<f64> = read_checkpoint(&mut a.as_slice()).unwrap();
            assert_eq!(back, ck);
            let mut b = Vec::new();
            write_checkpoint(&mut b, &back).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = rng_for(8, "x");
        let _: [u64; 3] = rng.random();
        let saved = RngState::capture(&rng);
        let a: [u64; 4] = rng.random();
        let b: [u64; 4] = RngState::decode(&saved.encode()).unwrap().restore().random();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let ck = sample(0);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        let bumped = String::from_utf8_lossy(&buf[..40]).replace("version=1", "version=2");
        let mut v2 = bumped.into_bytes();
        v2.extend_from_slice(&buf[40..]);
        let r: Result<Checkpoint<f64>> = read_checkpoint(&mut v2.as_slice());
        assert!(matches!(r, Err(Error::Format(m)) if m.contains("version")));
        let r: Result<Checkpoint<f64>> = read_checkpoint(&mut &buf[..buf.len() - 3]);
        assert!(matches!(r, Err(Error::Format(_))));
        let mut extra = buf.clone();
        extra.push(0);
        let r: Result<Checkpoint<f64>> = read_checkpoint(&mut extra.as_slice());
        assert!(matches!(r, Err(Error::Format(_))));
    }
}
