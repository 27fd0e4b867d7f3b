//! Encoder-decoder assembly with configurable placement of the enhanced
//! attention block.
//!
//! Layers are pre-norm residual blocks: normalize, apply the sublayer,
//! optionally drop out, then add back. Encoder self-attention and decoder
//! self-attention can each independently carry the convolution-enhanced
//! block; cross-attention stays plain. Decoder-side convolutions are
//! causal (left padding only) so teacher-forced training and step-wise
//! decoding see the same function.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::esa::{
    attention_block, cross_attention_forward, AttentionMask, EsaParams, FusionMode,
};
use crate::gnconv::dimension_schedule;
use crate::params::{Affine, BoundParams, Norm, ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor};

/// Which attention blocks carry the enhanced (convolutional) form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EsaPlacement {
    None,
    Encoder,
    Decoder,
    Both,
}

impl FromStr for EsaPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(EsaPlacement::None),
            "encoder" => Ok(EsaPlacement::Encoder),
            "decoder" => Ok(EsaPlacement::Decoder),
            "both" => Ok(EsaPlacement::Both),
            other => Err(Error::InvalidConfig {
                field: "esa",
                reason: format!("unknown placement `{other}` (encoder|decoder|both|none)"),
            }),
        }
    }
}

impl std::fmt::Display for EsaPlacement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EsaPlacement::None => "none",
            EsaPlacement::Encoder => "encoder",
            EsaPlacement::Decoder => "decoder",
            EsaPlacement::Both => "both",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub order: usize,
    pub kernel: usize,
    pub alpha: f64,
    pub fusion: FusionMode,
    pub esa_in_encoder: bool,
    pub esa_in_decoder: bool,
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub pad_id: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_layers: 2,
            decoder_layers: 2,
            model_dim: 32,
            heads: 4,
            ffn_dim: 128,
            order: 2,
            kernel: 7,
            alpha: 1.0,
            fusion: FusionMode::Internal,
            esa_in_encoder: true,
            esa_in_decoder: false,
            source_vocab: 20,
            target_vocab: 20,
            max_len: 64,
            dropout: 0.0,
            pad_id: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &'static str, reason: String| Err(Error::InvalidConfig { field, reason });
        if self.encoder_layers == 0 {
            return fail("encoder_layers", "must be >= 1".into());
        }
        if self.decoder_layers == 0 {
            return fail("decoder_layers", "must be >= 1".into());
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return fail(
                "heads",
                format!("heads {} must divide model_dim {}", self.heads, self.model_dim),
            );
        }
        dimension_schedule(self.model_dim, self.order)?;
        if self.ffn_dim == 0 {
            return fail("ffn_dim", "must be >= 1".into());
        }
        if self.kernel == 0 {
            return fail("kernel", "must be >= 1".into());
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return fail("alpha", format!("alpha {} must be positive and finite", self.alpha));
        }
        if self.source_vocab == 0 || self.target_vocab == 0 {
            return fail("source_vocab", "vocabularies must be >= 1".into());
        }
        if self.pad_id >= self.source_vocab.min(self.target_vocab) {
            return fail("pad_id", format!("pad_id {} outside both vocabularies", self.pad_id));
        }
        if self.max_len == 0 {
            return fail("max_len", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout", format!("dropout {} must be in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn set_placement(&mut self, p: EsaPlacement) {
        let (enc, dec) = match p {
            EsaPlacement::None => (false, false),
            EsaPlacement::Encoder => (true, false),
            EsaPlacement::Decoder => (false, true),
            EsaPlacement::Both => (true, true),
        };
        self.esa_in_encoder = enc;
        self.esa_in_decoder = dec;
    }

    pub fn placement(&self) -> EsaPlacement {
        match (self.esa_in_encoder, self.esa_in_decoder) {
            (false, false) => EsaPlacement::None,
            (true, false) => EsaPlacement::Encoder,
            (false, true) => EsaPlacement::Decoder,
            (true, true) => EsaPlacement::Both,
        }
    }

    fn layer_fusion(&self, placed: bool) -> FusionMode {
        if placed {
            self.fusion
        } else {
            FusionMode::None
        }
    }
}

#[derive(Debug, Clone)]
struct Ffn {
    lin1: Affine,
    lin2: Affine,
}

impl Ffn {
    fn build(pb: &mut ParamBuilder<'_>, dim: usize, hidden: usize) -> Self {
        Ffn {
            lin1: pb.affine("lin1", dim, hidden),
            lin2: pb.affine("lin2", hidden, dim),
        }
    }

    fn forward<'t>(&self, x: Tensor<'t>, bound: &BoundParams<'t>) -> Result<Tensor<'t>> {
        x.linear(bound[self.lin1.w], bound[self.lin1.b])?
            .relu()
            .linear(bound[self.lin2.w], bound[self.lin2.b])
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: EsaParams,
    norm_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: EsaParams,
    norm_cross: Norm,
    cross_attn: EsaParams,
    norm_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
pub(crate) struct ModelLayout {
    src_embed: ParamId,
    tgt_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    out_proj: Affine,
}

/// A built model: configuration, parameter store and typed layout, plus
/// the precomputed sinusoidal position table.
#[derive(Debug)]
pub struct GncformerModel {
    config: ModelConfig,
    store: ParamStore,
    layout: ModelLayout,
    posenc: Vec<f64>,
}

const LN_EPS: f64 = 1e-12;

fn sinusoidal_posenc(max_len: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * dim];
    for pos in 0..max_len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            pe[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Deterministically initialize a model from a configuration and seed.
/// The same pair always yields bit-identical parameters.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<GncformerModel> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let c = config;
    let embed_bound = 1.0 / (c.model_dim as f64).sqrt();
    let src_embed = pb.uniform("src_embed", &[c.source_vocab, c.model_dim], embed_bound);
    let tgt_embed = pb.uniform("tgt_embed", &[c.target_vocab, c.model_dim], embed_bound);

    let mut encoder = Vec::with_capacity(c.encoder_layers);
    for i in 0..c.encoder_layers {
        encoder.push(pb.scoped(&format!("encoder.{i}"), |pb| -> Result<EncoderLayer> {
            Ok(EncoderLayer {
                norm_attn: pb.norm("norm_attn", c.model_dim),
                attn: pb.scoped("attn", |pb| {
                    EsaParams::build(
                        pb,
                        c.model_dim,
                        c.heads,
                        c.layer_fusion(c.esa_in_encoder),
                        c.order,
                        c.kernel,
                        c.alpha,
                        false,
                    )
                })?,
                norm_ffn: pb.norm("norm_ffn", c.model_dim),
                ffn: pb.scoped("ffn", |pb| Ffn::build(pb, c.model_dim, c.ffn_dim)),
            })
        })?);
    }
    let encoder_norm = pb.norm("encoder_norm", c.model_dim);

    let mut decoder = Vec::with_capacity(c.decoder_layers);
    for i in 0..c.decoder_layers {
        decoder.push(pb.scoped(&format!("decoder.{i}"), |pb| -> Result<DecoderLayer> {
            Ok(DecoderLayer {
                norm_self: pb.norm("norm_self", c.model_dim),
                self_attn: pb.scoped("self_attn", |pb| {
                    EsaParams::build(
                        pb,
                        c.model_dim,
                        c.heads,
                        c.layer_fusion(c.esa_in_decoder),
                        c.order,
                        c.kernel,
                        c.alpha,
                        true,
                    )
                })?,
                norm_cross: pb.norm("norm_cross", c.model_dim),
                cross_attn: pb.scoped("cross_attn", |pb| {
                    EsaParams::build(
                        pb,
                        c.model_dim,
                        c.heads,
                        FusionMode::None,
                        c.order,
                        c.kernel,
                        c.alpha,
                        false,
                    )
                })?,
                norm_ffn: pb.norm("norm_ffn", c.model_dim),
                ffn: pb.scoped("ffn", |pb| Ffn::build(pb, c.model_dim, c.ffn_dim)),
            })
        })?);
    }
    let decoder_norm = pb.norm("decoder_norm", c.model_dim);
    let out_proj = pb.affine("out_proj", c.model_dim, c.target_vocab);

    Ok(GncformerModel {
        config: config.clone(),
        store,
        layout: ModelLayout {
            src_embed,
            tgt_embed,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            out_proj,
        },
        posenc: sinusoidal_posenc(config.max_len, config.model_dim),
    })
}

/// Inverted-dropout context for training-mode forward passes.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

fn maybe_dropout<'t>(
    tape: &'t Tape,
    x: Tensor<'t>,
    ctx: Option<&mut Dropout<'_>>,
) -> Result<Tensor<'t>> {
    let Some(ctx) = ctx else { return Ok(x) };
    if ctx.rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - ctx.rate;
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if ctx.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    x.mul(tape.constant(mask, &x.shape())?)
}

impl GncformerModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_tokens(&self, tokens: &[usize], vocab: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidShape {
                op: "forward",
                shape: vec![0],
                reason: "empty token sequence".into(),
            });
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { token: bad, vocab });
        }
        Ok(())
    }

    fn embed_input<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        table: ParamId,
        tokens: &[usize],
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Tensor<'t>> {
        let d = self.config.model_dim;
        let scaled = bound[table]
            .embedding(tokens)?
            .scale((d as f64).sqrt());
        let pe = tape.constant(self.posenc[..tokens.len() * d].to_vec(), &[tokens.len(), d])?;
        maybe_dropout(tape, scaled.add(pe)?, dropout)
    }

    fn keep_flags(&self, tokens: &[usize]) -> Vec<bool> {
        tokens.iter().map(|&t| t != self.config.pad_id).collect()
    }

    /// Encoder stack over the source tokens; returns the memory sequence.
    pub fn encode_on<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        source: &[usize],
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Tensor<'t>> {
        self.check_tokens(source, self.config.source_vocab)?;
        let src_mask = AttentionMask::key_padding(source.len(), &self.keep_flags(source))?;
        let mut x = self.embed_input(tape, bound, self.layout.src_embed, source, dropout.as_deref_mut())?;
        for layer in &self.layout.encoder {
            let normed = x.layer_norm(
                bound[layer.norm_attn.gain],
                bound[layer.norm_attn.shift],
                LN_EPS,
            )?;
            let a = attention_block(normed, &layer.attn, bound, &src_mask, tape)?;
            x = x.add(maybe_dropout(tape, a, dropout.as_deref_mut())?)?;
            let normed = x.layer_norm(
                bound[layer.norm_ffn.gain],
                bound[layer.norm_ffn.shift],
                LN_EPS,
            )?;
            let f = layer.ffn.forward(normed, bound)?;
            x = x.add(maybe_dropout(tape, f, dropout.as_deref_mut())?)?;
        }
        x.layer_norm(
            bound[self.layout.encoder_norm.gain],
            bound[self.layout.encoder_norm.shift],
            LN_EPS,
        )
    }

    /// Decoder stack over the target prefix given encoder memory; returns
    /// logits `[T_target, target_vocab]`.
    pub fn decode_on<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        memory: Tensor<'t>,
        source: &[usize],
        target: &[usize],
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Tensor<'t>> {
        self.check_tokens(target, self.config.target_vocab)?;
        let t_tgt = target.len();
        let self_mask = AttentionMask::causal(t_tgt)
            .and(&AttentionMask::key_padding(t_tgt, &self.keep_flags(target))?)?;
        let cross_mask = AttentionMask::key_padding(t_tgt, &self.keep_flags(source))?;
        let mut x = self.embed_input(tape, bound, self.layout.tgt_embed, target, dropout.as_deref_mut())?;
        for layer in &self.layout.decoder {
            let normed = x.layer_norm(
                bound[layer.norm_self.gain],
                bound[layer.norm_self.shift],
                LN_EPS,
            )?;
            let a = attention_block(normed, &layer.self_attn, bound, &self_mask, tape)?;
            x = x.add(maybe_dropout(tape, a, dropout.as_deref_mut())?)?;
            let normed = x.layer_norm(
                bound[layer.norm_cross.gain],
                bound[layer.norm_cross.shift],
                LN_EPS,
            )?;
            let c = cross_attention_forward(normed, memory, &layer.cross_attn, bound, &cross_mask, tape)?;
            x = x.add(maybe_dropout(tape, c, dropout.as_deref_mut())?)?;
            let normed = x.layer_norm(
                bound[layer.norm_ffn.gain],
                bound[layer.norm_ffn.shift],
                LN_EPS,
            )?;
            let f = layer.ffn.forward(normed, bound)?;
            x = x.add(maybe_dropout(tape, f, dropout.as_deref_mut())?)?;
        }
        let x = x.layer_norm(
            bound[self.layout.decoder_norm.gain],
            bound[self.layout.decoder_norm.shift],
            LN_EPS,
        )?;
        x.linear(bound[self.layout.out_proj.w], bound[self.layout.out_proj.b])
    }

    /// Teacher-forced forward pass on a caller-provided tape.
    pub fn forward_on<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        source: &[usize],
        target: &[usize],
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Tensor<'t>> {
        let memory = self.encode_on(tape, bound, source, dropout.as_deref_mut())?;
        self.decode_on(tape, bound, memory, source, target, dropout)
    }

    /// Evaluation-mode logits as plain values, shaped `[T_target, vocab]`
    /// in row-major order.
    pub fn forward_logits(&self, source: &[usize], target: &[usize]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.store.bind(&tape)?;
        Ok(self.forward_on(&tape, &bound, source, target, None)?.data())
    }

    /// Iterative argmax decoding from `bos` until `eos` or `max_steps`.
    /// The returned sequence excludes both sentinels.
    pub fn greedy_decode(
        &self,
        source: &[usize],
        max_steps: usize,
        bos: usize,
        eos: usize,
    ) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let bound = self.store.bind(&tape)?;
        let memory = self.encode_on(&tape, &bound, source, None)?;
        let vocab = self.config.target_vocab;
        let mut prefix = vec![bos];
        let mut out = Vec::new();
        for _ in 0..max_steps {
            if prefix.len() > self.config.max_len {
                break;
            }
            let logits = self
                .decode_on(&tape, &bound, memory, source, &prefix, None)?
                .data();
            let last = &logits[(prefix.len() - 1) * vocab..prefix.len() * vocab];
            let next = last
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(eos);
            if next == eos {
                break;
            }
            out.push(next);
            prefix.push(next);
        }
        Ok(out)
    }
}
