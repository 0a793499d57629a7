// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy encoder-decoder Transformer with a mountable Neural Knowledge Bank.
//!
//! Layout is pre-norm: every sublayer reads `LayerNorm(x)` and adds its output
//! back into the residual stream. The encoder ends with a layer norm; the
//! decoder does not, so the residual stream at the top of the decoder maps
//! linearly onto the logits `y·Eᵀ`. That keeps each value vector of the last
//! decoder FFN (and of an NKB mounted there) directly readable in vocabulary
//! space. No sublayer has a bias term.

mod forward;
mod memory;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Activation;
use crate::tensor::Tensor;

pub use forward::{BankTap, Bound, Decoded, Dropout, ForwardPass, ForwardTrace};
pub use memory::{ffn_forward, ffn_memory_forward, nkb_forward, self_attention, AttentionMask};

/// Reserved token ids shared by every vocabulary.
pub mod special {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const SENTINEL: usize = 3;
    pub const COUNT: usize = 4;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stack {
    Encoder,
    Decoder,
}

/// Where the knowledge bank is attached: the FFN of one layer of one stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NkbSite {
    pub stack: Stack,
    pub layer: usize,
}

impl NkbSite {
    pub fn last_decoder(num_layers: usize) -> Self {
        Self {
            stack: Stack::Decoder,
            layer: num_layers.saturating_sub(1),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (stack, layer) = s.split_once(':')?;
        let stack = match stack {
            "encoder" => Stack::Encoder,
            "decoder" => Stack::Decoder,
            _ => return None,
        };
        Some(Self {
            stack,
            layer: layer.parse().ok()?,
        })
    }
}

impl std::fmt::Display for NkbSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let stack = match self.stack {
            Stack::Encoder => "encoder",
            Stack::Decoder => "decoder",
        };
        write!(f, "{stack}:{}", self.layer)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Layers per stack.
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
    /// Number of knowledge-bank slots; 0 means unmounted.
    pub nkb_dim: usize,
    pub nkb_site: NkbSite,
    /// Standard deviation of the normal initializer for weight matrices.
    pub init_std: f64,
    /// Standard deviation of the shared embedding. Inputs read rows divided
    /// by it, logits use the raw rows.
    pub embedding_std: f64,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            vocab_size,
            max_seq_len: 32,
            activation: Activation::Relu,
            nkb_dim: 0,
            nkb_site: NkbSite::last_decoder(2),
            init_std: 0.02,
            embedding_std: 3.0,
            layer_norm_eps: 1e-6,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.model_dim
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.num_layers == 0 || self.model_dim == 0 || self.num_heads == 0 {
            return fail("num_layers, model_dim and num_heads must be positive".into());
        }
        if self.model_dim % self.num_heads != 0 {
            return fail(format!(
                "num_heads {} does not divide model_dim {}",
                self.num_heads, self.model_dim
            ));
        }
        if self.vocab_size <= special::COUNT {
            return fail(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.max_seq_len < 2 {
            return fail("max_seq_len must be at least 2".into());
        }
        if self.nkb_site.layer >= self.num_layers {
            return fail(format!(
                "nkb_site {} outside {} layers",
                self.nkb_site, self.num_layers
            ));
        }
        if !(self.init_std > 0.0 && self.embedding_std > 0.0 && self.layer_norm_eps > 0.0) {
            return fail("init_std, embedding_std and layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Flat `key=value` lines, in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("num_layers".into(), self.num_layers.to_string()),
            ("model_dim".into(), self.model_dim.to_string()),
            ("num_heads".into(), self.num_heads.to_string()),
            ("ffn_dim".into(), self.ffn_dim().to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("max_seq_len".into(), self.max_seq_len.to_string()),
            ("activation".into(), self.activation.name().into()),
            ("nkb_dim".into(), self.nkb_dim.to_string()),
            ("nkb_site".into(), self.nkb_site.to_string()),
            ("init_std".into(), format!("{:?}", self.init_std)),
            ("embedding_std".into(), format!("{:?}", self.embedding_std)),
            ("layer_norm_eps".into(), format!("{:?}", self.layer_norm_eps)),
        ]
    }

    pub fn from_kv<'k>(pairs: impl IntoIterator<Item = (&'k str, &'k str)>) -> Result<Self> {
        let mut cfg = Self::desk(special::COUNT + 1);
        let mut ffn_dim = None;
        for (k, v) in pairs {
            let bad = || Error::config(format!("bad value `{v}` for model key `{k}`"));
            match k {
                "num_layers" => cfg.num_layers = v.parse().map_err(|_| bad())?,
                "model_dim" => cfg.model_dim = v.parse().map_err(|_| bad())?,
                "num_heads" => cfg.num_heads = v.parse().map_err(|_| bad())?,
                "ffn_dim" => ffn_dim = Some(v.parse::<usize>().map_err(|_| bad())?),
                "vocab_size" => cfg.vocab_size = v.parse().map_err(|_| bad())?,
                "max_seq_len" => cfg.max_seq_len = v.parse().map_err(|_| bad())?,
                "activation" => cfg.activation = Activation::parse(v).ok_or_else(bad)?,
                "nkb_dim" => cfg.nkb_dim = v.parse().map_err(|_| bad())?,
                "nkb_site" => cfg.nkb_site = NkbSite::parse(v).ok_or_else(bad)?,
                "init_std" => cfg.init_std = v.parse().map_err(|_| bad())?,
                "embedding_std" => cfg.embedding_std = v.parse().map_err(|_| bad())?,
                "layer_norm_eps" => cfg.layer_norm_eps = v.parse().map_err(|_| bad())?,
                other => return Err(Error::config(format!("unknown model key `{other}`"))),
            }
        }
        if let Some(f) = ffn_dim {
            if f != cfg.ffn_dim() {
                return Err(Error::config(format!(
                    "ffn_dim {f} must equal 4·model_dim = {}",
                    cfg.ffn_dim()
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-head projections stored as `d×d` matrices: head `h` owns columns
/// `[h·d/n, (h+1)·d/n)` of `wq`, `wk` and `wv`, i.e. `W_h^Q` is a `d×(d/n)` block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<S> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
}

/// `w1` rows are keys, `w2` rows are values; row `i` of each forms memory slot `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<S> {
    pub w1: Tensor<S>,
    pub w2: Tensor<S>,
}

/// Extra key/value slots concatenated after an FFN's own: `w1` and `w2` are `d′×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralKnowledgeBank<S> {
    pub w1: Tensor<S>,
    pub w2: Tensor<S>,
}

impl<S: Scalar> NeuralKnowledgeBank<S> {
    pub fn slots(&self) -> usize {
        self.w1.rows()
    }

    pub fn key(&self, slot: usize) -> &[S] {
        self.w1.row(slot)
    }

    pub fn value(&self, slot: usize) -> &[S] {
        self.w2.row(slot)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<S> {
    pub ln_attn: Tensor<S>,
    pub attn: AttentionParams<S>,
    pub ln_ffn: Tensor<S>,
    pub ffn: FfnParams<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<S> {
    pub ln_self: Tensor<S>,
    pub self_attn: AttentionParams<S>,
    pub ln_cross: Tensor<S>,
    pub cross_attn: AttentionParams<S>,
    pub ln_ffn: Tensor<S>,
    pub ffn: FfnParams<S>,
}

/// Initialization of freshly mounted knowledge-bank slots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NkbInit {
    pub key_std: f64,
    /// 0 gives all-zero values, which leaves the model's function unchanged.
    pub value_std: f64,
}

impl Default for NkbInit {
    fn default() -> Self {
        Self {
            key_std: 0.02,
            value_std: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqModel<S> {
    pub config: ModelConfig,
    /// Shared `N_vocab×d` embedding: input lookup and output projection.
    pub embedding: Tensor<S>,
    pub encoder: Vec<EncoderLayer<S>>,
    pub encoder_norm: Tensor<S>,
    pub decoder: Vec<DecoderLayer<S>>,
    pub nkb: Option<NeuralKnowledgeBank<S>>,
}

fn normal_matrix<S: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Tensor<S> {
    let data = if std == 0.0 {
        vec![S::zero(); rows * cols]
    } else {
        let dist = Normal::new(0.0, std).expect("positive std");
        (0..rows * cols).map(|_| S::lit(dist.sample(rng))).collect()
    };
    Tensor::matrix(rows, cols, data).expect("sized")
}

fn ones<S: Scalar>(d: usize) -> Tensor<S> {
    Tensor::vector(vec![S::one(); d])
}

impl<S: Scalar> AttentionParams<S> {
    fn init<R: Rng + ?Sized>(d: usize, std: f64, rng: &mut R) -> Self {
        Self {
            wq: normal_matrix(d, d, std, rng),
            wk: normal_matrix(d, d, std, rng),
            wv: normal_matrix(d, d, std, rng),
            wo: normal_matrix(d, d, std, rng),
        }
    }
}

impl<S: Scalar> FfnParams<S> {
    fn init<R: Rng + ?Sized>(d: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w1: normal_matrix(4 * d, d, std, rng),
            w2: normal_matrix(4 * d, d, std, rng),
        }
    }
}

impl<S: Scalar> Seq2SeqModel<S> {
    /// Random initialization. A nonzero `config.nkb_dim` mounts a bank with
    /// [`NkbInit::default`].
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let std = config.init_std;
        let embedding = normal_matrix(config.vocab_size, d, config.embedding_std, rng);
        let encoder = (0..config.num_layers)
            .map(|_| EncoderLayer {
                ln_attn: ones(d),
                attn: AttentionParams::init(d, std, rng),
                ln_ffn: ones(d),
                ffn: FfnParams::init(d, std, rng),
            })
            .collect();
        let decoder = (0..config.num_layers)
            .map(|_| DecoderLayer {
                ln_self: ones(d),
                self_attn: AttentionParams::init(d, std, rng),
                ln_cross: ones(d),
                cross_attn: AttentionParams::init(d, std, rng),
                ln_ffn: ones(d),
                ffn: FfnParams::init(d, std, rng),
            })
            .collect();
        let nkb_dim = config.nkb_dim;
        let site = config.nkb_site;
        let mut model = Self {
            config: ModelConfig { nkb_dim: 0, ..config },
            embedding,
            encoder,
            encoder_norm: ones(d),
            decoder,
            nkb: None,
        };
        if nkb_dim > 0 {
            model.mount_nkb(site, nkb_dim, NkbInit::default(), rng)?;
        }
        Ok(model)
    }

    pub fn is_mounted(&self) -> bool {
        self.nkb.is_some()
    }

    /// Attaches `slots` key/value memory slots to the FFN at `site`.
    /// Base parameters are not touched.
    pub fn mount_nkb<R: Rng + ?Sized>(
        &mut self,
        site: NkbSite,
        slots: usize,
        init: NkbInit,
        rng: &mut R,
    ) -> Result<()> {
        if self.nkb.is_some() {
            return Err(Error::contract(format!(
                "a knowledge bank is already mounted at {}",
                self.config.nkb_site
            )));
        }
        if site.layer >= self.config.num_layers {
            return Err(Error::contract(format!(
                "site {site} outside {} layers",
                self.config.num_layers
            )));
        }
        if slots == 0 {
            return Err(Error::contract("knowledge bank needs at least one slot"));
        }
        let d = self.config.model_dim;
        let w1 = normal_matrix(slots, d, init.key_std, rng);
        let w2 = normal_matrix(slots, d, init.value_std, rng);
        self.nkb = Some(NeuralKnowledgeBank { w1, w2 });
        self.config.nkb_dim = slots;
        self.config.nkb_site = site;
        Ok(())
    }

    pub fn nkb(&self) -> Result<&NeuralKnowledgeBank<S>> {
        self.nkb
            .as_ref()
            .ok_or_else(|| Error::contract("no knowledge bank is mounted"))
    }

    pub fn nkb_mut(&mut self) -> Result<&mut NeuralKnowledgeBank<S>> {
        self.nkb
            .as_mut()
            .ok_or_else(|| Error::contract("no knowledge bank is mounted"))
    }

    /// Output embedding row of `token`.
    pub fn token_embedding(&self, token: usize) -> &[S] {
        self.embedding.row(token)
    }

    /// All parameters with stable dotted names, in a fixed traversal order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, layer) in self.encoder.iter().enumerate() {
            let p = format!("encoder.{l}");
            out.push((format!("{p}.ln_attn"), &layer.ln_attn));
            push_attn(&mut out, &format!("{p}.attn"), &layer.attn);
            out.push((format!("{p}.ln_ffn"), &layer.ln_ffn));
            out.push((format!("{p}.ffn.w1"), &layer.ffn.w1));
            out.push((format!("{p}.ffn.w2"), &layer.ffn.w2));
        }
        out.push(("encoder.norm".into(), &self.encoder_norm));
        for (l, layer) in self.decoder.iter().enumerate() {
            let p = format!("decoder.{l}");
            out.push((format!("{p}.ln_self"), &layer.ln_self));
            push_attn(&mut out, &format!("{p}.self_attn"), &layer.self_attn);
            out.push((format!("{p}.ln_cross"), &layer.ln_cross));
            push_attn(&mut out, &format!("{p}.cross_attn"), &layer.cross_attn);
            out.push((format!("{p}.ln_ffn"), &layer.ln_ffn));
            out.push((format!("{p}.ffn.w1"), &layer.ffn.w1));
            out.push((format!("{p}.ffn.w2"), &layer.ffn.w2));
        }
        if let Some(nkb) = &self.nkb {
            out.push(("nkb.w1".into(), &nkb.w1));
            out.push(("nkb.w2".into(), &nkb.w2));
        }
        out
    }

    /// Mutable view in the same order as [`Seq2SeqModel::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.encoder {
            out.push(&mut layer.ln_attn);
            out.extend(attn_mut(&mut layer.attn));
            out.push(&mut layer.ln_ffn);
            out.push(&mut layer.ffn.w1);
            out.push(&mut layer.ffn.w2);
        }
        out.push(&mut self.encoder_norm);
        for layer in &mut self.decoder {
            out.push(&mut layer.ln_self);
            out.extend(attn_mut(&mut layer.self_attn));
            out.push(&mut layer.ln_cross);
            out.extend(attn_mut(&mut layer.cross_attn));
            out.push(&mut layer.ln_ffn);
            out.push(&mut layer.ffn.w1);
            out.push(&mut layer.ffn.w2);
        }
        if let Some(nkb) = &mut self.nkb {
            out.push(&mut nkb.w1);
            out.push(&mut nkb.w2);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// FFN parameters at `site`.
    pub fn ffn_at(&self, site: NkbSite) -> &FfnParams<S> {
        match site.stack {
            Stack::Encoder => &self.encoder[site.layer].ffn,
            Stack::Decoder => &self.decoder[site.layer].ffn,
        }
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Seq2SeqModel<T> {
        let attn = |a: &AttentionParams<S>| AttentionParams {
            wq: a.wq.cast(),
            wk: a.wk.cast(),
            wv: a.wv.cast(),
            wo: a.wo.cast(),
        };
        let ffn = |f: &FfnParams<S>| FfnParams {
            w1: f.w1.cast(),
            w2: f.w2.cast(),
        };
        Seq2SeqModel {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayer {
                    ln_attn: l.ln_attn.cast(),
                    attn: attn(&l.attn),
                    ln_ffn: l.ln_ffn.cast(),
                    ffn: ffn(&l.ffn),
                })
                .collect(),
            encoder_norm: self.encoder_norm.cast(),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLayer {
                    ln_self: l.ln_self.cast(),
                    self_attn: attn(&l.self_attn),
                    ln_cross: l.ln_cross.cast(),
                    cross_attn: attn(&l.cross_attn),
                    ln_ffn: l.ln_ffn.cast(),
                    ffn: ffn(&l.ffn),
                })
                .collect(),
            nkb: self.nkb.as_ref().map(|n| NeuralKnowledgeBank {
                w1: n.w1.cast(),
                w2: n.w2.cast(),
            }),
        }
    }
}

fn push_attn<'a, S>(out: &mut Vec<(String, &'a Tensor<S>)>, prefix: &str, a: &'a AttentionParams<S>) {
    out.push((format!("{prefix}.wq"), &a.wq));
    out.push((format!("{prefix}.wk"), &a.wk));
    out.push((format!("{prefix}.wv"), &a.wv));
    out.push((format!("{prefix}.wo"), &a.wo));
}

fn attn_mut<S>(a: &mut AttentionParams<S>) -> [&mut Tensor<S>; 4] {
    [&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]
}

/// True for parameters that belong to the knowledge bank.
pub fn is_nkb_param(name: &str) -> bool {
    name.starts_with("nkb.")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            vocab_size: 12,
            max_seq_len: 8,
            nkb_site: NkbSite::last_decoder(1),
            ..ModelConfig::desk(12)
        }
    }

    #[test]
    fn config_invariants() {
        let mut c = tiny();
        assert_eq!(c.ffn_dim(), 32);
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_kv_roundtrip() {
        let c = ModelConfig {
            nkb_dim: 5,
            activation: Activation::Gelu,
            ..tiny()
        };
        let kv = c.to_kv();
        let back = ModelConfig::from_kv(kv.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, c);
        assert!(ModelConfig::from_kv([("bogus", "1")]).is_err());
        assert!(ModelConfig::from_kv([("model_dim", "8"), ("ffn_dim", "16")]).is_err());
    }

    #[test]
    fn mount_adds_exactly_two_matrices() {
        let mut rng = rng_for(1, "t");
        let mut m = Seq2SeqModel::<f64>::new(tiny(), &mut rng).unwrap();
        let before = m.num_params();
        let names_before: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        let snapshot = m.clone();
        m.mount_nkb(NkbSite::last_decoder(1), 3, NkbInit::default(), &mut rng)
            .unwrap();
        assert_eq!(m.num_params(), before + 2 * 3 * 8);
        let nkb = m.nkb().unwrap();
        assert!(nkb.w2.data().iter().all(|&x| x == 0.0));
        assert!(nkb.w1.data().iter().any(|&x| x != 0.0));
        for ((name, a), (_, b)) in snapshot.named_params().iter().zip(m.named_params()) {
            assert_eq!(*a, b, "{name} changed on mount");
        }
        assert_eq!(m.named_params().len(), names_before.len() + 2);
        let err = m.mount_nkb(NkbSite::last_decoder(1), 3, NkbInit::default(), &mut rng);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn params_mut_matches_named_order() {
        let mut rng = rng_for(2, "t");
        let mut m = Seq2SeqModel::<f64>::new(ModelConfig { nkb_dim: 4, ..tiny() }, &mut rng).unwrap();
        let shapes: Vec<Vec<usize>> = m.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let shapes_mut: Vec<Vec<usize>> = m.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, shapes_mut);
    }

    #[test]
    fn full_scale_nkb_dim_matches_base_ffn_width() {
        // A d=768 model has a 3072-wide FFN; the bank is sized to match it.
        let c = ModelConfig {
            model_dim: 768,
            num_heads: 12,
            nkb_dim: 3072,
            ..ModelConfig::desk(32)
        };
        assert_eq!(c.nkb_dim, c.ffn_dim());
        assert_eq!(c.nkb_site, NkbSite { stack: Stack::Decoder, layer: 1 });
    }
}
