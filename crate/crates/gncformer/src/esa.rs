//! Multi-head attention with a gated-convolution value path.
//!
//! The enhanced (internal-fusion) form transforms the full-width value
//! projection with a recursive gated convolution before the heads split,
//! so the attention weights mix convolution-enriched values. Two baseline
//! fusions exist for ablation: serial (convolution applied to the plain
//! attention output) and parallel (convolution of the block input added to
//! the plain attention output), plus a plain mode with the convolution
//! disabled entirely. All four share one code path so ablations differ
//! only in the mechanism under test.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gnconv::{gnconv_forward, GnConvParams};
use crate::params::{Affine, BoundParams, ParamBuilder};
use crate::tensor::{Tape, Tensor};

/// Additive pre-softmax bias for suppressed positions. Large enough that
/// the shifted exponential underflows to exactly zero in 64-bit floats.
pub const MASK_FILL: f64 = -1e9;

/// Where the convolutional path joins the attention path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Convolution transforms V inside the attention block.
    Internal,
    /// Convolution consumes the attention output.
    Serial,
    /// Convolution of the block input is added to the attention output.
    Parallel,
    /// Plain attention; the convolution is disabled entirely.
    None,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FusionMode::Internal => "internal",
            FusionMode::Serial => "serial",
            FusionMode::Parallel => "parallel",
            FusionMode::None => "none",
        };
        f.write_str(s)
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "internal" => Ok(FusionMode::Internal),
            "serial" => Ok(FusionMode::Serial),
            "parallel" => Ok(FusionMode::Parallel),
            "none" => Ok(FusionMode::None),
            other => Err(Error::InvalidConfig {
                field: "fusion",
                reason: format!("unknown fusion mode `{other}` (internal|serial|parallel|none)"),
            }),
        }
    }
}

/// Boolean keep/suppress matrix over `[t_query, t_key]`, plus the per-key
/// keep column used to silence padded positions on convolutional paths.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    t_query: usize,
    t_key: usize,
    keep: Vec<bool>,
    key_keep: Vec<bool>,
}

impl AttentionMask {
    /// Every query attends to every key.
    pub fn full(t_query: usize, t_key: usize) -> Self {
        AttentionMask {
            t_query,
            t_key,
            keep: vec![true; t_query * t_key],
            key_keep: vec![true; t_key],
        }
    }

    /// Query t attends to keys 0..=t.
    pub fn causal(t: usize) -> Self {
        let mut keep = vec![false; t * t];
        for q in 0..t {
            for k in 0..=q {
                keep[q * t + k] = true;
            }
        }
        AttentionMask {
            t_query: t,
            t_key: t,
            keep,
            key_keep: vec![true; t],
        }
    }

    /// Suppress the key positions flagged false for every query.
    pub fn key_padding(t_query: usize, key_keep: &[bool]) -> Result<Self> {
        if !key_keep.iter().any(|&k| k) {
            return Err(Error::FullyMaskedRow { row: 0 });
        }
        let mut keep = Vec::with_capacity(t_query * key_keep.len());
        for _ in 0..t_query {
            keep.extend_from_slice(key_keep);
        }
        Ok(AttentionMask {
            t_query,
            t_key: key_keep.len(),
            keep,
            key_keep: key_keep.to_vec(),
        })
    }

    /// Intersection of two masks over the same geometry.
    pub fn and(&self, other: &AttentionMask) -> Result<AttentionMask> {
        if self.t_query != other.t_query || self.t_key != other.t_key {
            return Err(Error::ShapeMismatch {
                op: "mask and",
                lhs: vec![self.t_query, self.t_key],
                rhs: vec![other.t_query, other.t_key],
            });
        }
        let keep: Vec<bool> = self
            .keep
            .iter()
            .zip(&other.keep)
            .map(|(&a, &b)| a && b)
            .collect();
        let key_keep: Vec<bool> = self
            .key_keep
            .iter()
            .zip(&other.key_keep)
            .map(|(&a, &b)| a && b)
            .collect();
        Ok(AttentionMask {
            t_query: self.t_query,
            t_key: self.t_key,
            keep,
            key_keep,
        })
    }

    pub fn t_query(&self) -> usize {
        self.t_query
    }

    pub fn t_key(&self) -> usize {
        self.t_key
    }

    pub fn keeps(&self, query: usize, key: usize) -> bool {
        self.keep[query * self.t_key + key]
    }

    pub fn key_kept(&self, key: usize) -> bool {
        self.key_keep[key]
    }

    fn first_empty_row(&self) -> Option<usize> {
        (0..self.t_query).find(|&q| !self.keep[q * self.t_key..(q + 1) * self.t_key].iter().any(|&k| k))
    }

    fn all_keys_kept(&self) -> bool {
        self.key_keep.iter().all(|&k| k)
    }
}

/// Projection weights and geometry of one attention block.
#[derive(Debug, Clone)]
pub struct EsaParams {
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub fusion: FusionMode,
    pub w_q: Affine,
    pub w_k: Affine,
    pub w_v: Affine,
    pub w_o: Affine,
    /// Present for every fusion mode except `None`.
    pub gnconv: Option<GnConvParams>,
}

impl EsaParams {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        pb: &mut ParamBuilder<'_>,
        dim: usize,
        heads: usize,
        fusion: FusionMode,
        order: usize,
        kernel: usize,
        alpha: f64,
        causal_conv: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidConfig {
                field: "heads",
                reason: format!("heads {heads} must divide model_dim {dim}"),
            });
        }
        let w_q = pb.affine("w_q", dim, dim);
        let w_k = pb.affine("w_k", dim, dim);
        let w_v = pb.affine("w_v", dim, dim);
        let gnconv = if fusion == FusionMode::None {
            None
        } else {
            Some(pb.scoped("gnconv", |pb| {
                GnConvParams::build(pb, dim, order, kernel, alpha, causal_conv)
            })?)
        };
        let w_o = pb.affine("w_o", dim, dim);
        Ok(EsaParams {
            dim,
            heads,
            head_dim: dim / heads,
            fusion,
            w_q,
            w_k,
            w_v,
            w_o,
            gnconv,
        })
    }
}

/// Softmax over keys of `Q K^T / sqrt(d)` with suppressed entries forced
/// to an effective minus infinity. `q`, `k` are `[h, T, d]`; the result is
/// `[h, T_query, T_key]` with rows summing to one.
pub fn attention_matrix<'t>(
    q: Tensor<'t>,
    k: Tensor<'t>,
    mask: &AttentionMask,
    tape: &'t Tape,
) -> Result<Tensor<'t>> {
    let qs = q.shape();
    let ks = k.shape();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::ShapeMismatch {
            op: "attention_matrix",
            lhs: qs,
            rhs: ks,
        });
    }
    let (heads, t_query, d) = (qs[0], qs[1], qs[2]);
    let t_key = ks[1];
    if mask.t_query() != t_query || mask.t_key() != t_key {
        return Err(Error::ShapeMismatch {
            op: "attention_matrix mask",
            lhs: vec![t_query, t_key],
            rhs: vec![mask.t_query(), mask.t_key()],
        });
    }
    if let Some(row) = mask.first_empty_row() {
        return Err(Error::FullyMaskedRow { row });
    }
    let scores = q
        .matmul(k.transpose_last2()?)?
        .scale(1.0 / (d as f64).sqrt());
    let mut bias = Vec::with_capacity(heads * t_query * t_key);
    for _ in 0..heads {
        bias.extend(mask.keep.iter().map(|&keep| if keep { 0.0 } else { MASK_FILL }));
    }
    let bias = tape.constant(bias, &[heads, t_query, t_key])?;
    scores.add(bias)?.softmax_lastdim()
}

fn split_heads<'t>(x: Tensor<'t>, heads: usize) -> Result<Tensor<'t>> {
    let shape = x.shape();
    let (t, d) = (shape[0], shape[1]);
    x.reshape(&[t, heads, d / heads])?.permute(&[1, 0, 2])
}

fn merge_heads<'t>(x: Tensor<'t>) -> Result<Tensor<'t>> {
    let shape = x.shape();
    let (h, t, d) = (shape[0], shape[1], shape[2]);
    x.permute(&[1, 0, 2])?.reshape(&[t, h * d])
}

/// Multiply suppressed key rows by zero, so convolution taps read zeros
/// there exactly as they would read appended zero padding.
fn zero_suppressed_rows<'t>(
    x: Tensor<'t>,
    mask: &AttentionMask,
    tape: &'t Tape,
) -> Result<Tensor<'t>> {
    if mask.all_keys_kept() {
        return Ok(x);
    }
    let shape = x.shape();
    let d = shape[1];
    let mut m = Vec::with_capacity(shape[0] * d);
    for &keep in &mask.key_keep {
        let v = if keep { 1.0 } else { 0.0 };
        m.extend(std::iter::repeat(v).take(d));
    }
    x.mul(tape.constant(m, &shape)?)
}

/// Shared attention spine: project queries from `q_in` and keys from
/// `kv_in`, weight the provided `value` rows, merge heads and project out.
fn attend_with_value<'t>(
    q_in: Tensor<'t>,
    kv_in: Tensor<'t>,
    value: Tensor<'t>,
    p: &EsaParams,
    bound: &BoundParams<'t>,
    mask: &AttentionMask,
    tape: &'t Tape,
) -> Result<Tensor<'t>> {
    let q = split_heads(q_in.linear(bound[p.w_q.w], bound[p.w_q.b])?, p.heads)?;
    let k = split_heads(kv_in.linear(bound[p.w_k.w], bound[p.w_k.b])?, p.heads)?;
    let attn = attention_matrix(q, k, mask, tape)?;
    let v = split_heads(value, p.heads)?;
    let ctx = merge_heads(attn.matmul(v)?)?;
    ctx.linear(bound[p.w_o.w], bound[p.w_o.b])
}

/// Plain multi-head self-attention over `x: [T, dim]`.
pub fn plain_attention_forward<'t>(
    x: Tensor<'t>,
    p: &EsaParams,
    bound: &BoundParams<'t>,
    mask: &AttentionMask,
    tape: &'t Tape,
) -> Result<Tensor<'t>> {
    let value = zero_suppressed_rows(x.linear(bound[p.w_v.w], bound[p.w_v.b])?, mask, tape)?;
    attend_with_value(x, x, value, p, bound, mask, tape)
}

/// Plain multi-head cross-attention: queries from `q_in`, keys and values
/// from `kv_in`. The convolutional path never applies here.
pub fn cross_attention_forward<'t>(
    q_in: Tensor<'t>,
    kv_in: Tensor<'t>,
    p: &EsaParams,
    bound: &BoundParams<'t>,
    mask: &AttentionMask,
    tape: &'t Tape,
) -> Result<Tensor<'t>> {
    let value = zero_suppressed_rows(kv_in.linear(bound[p.w_v.w], bound[p.w_v.b])?, mask, tape)?;
    attend_with_value(q_in, kv_in, value, p, bound, mask, tape)
}

fn gnconv_of(p: &EsaParams) -> Result<&GnConvParams> {
    p.gnconv.as_ref().ok_or(Error::InvalidConfig {
        field: "fusion",
        reason: "fusion mode requires a gnconv block".into(),
    })
}

/// Enhanced self-attention: the full-width value projection is transformed
/// by the recursive gated convolution before the heads split, and the
/// attention matrix is applied to the transformed values.
pub fn esa_forward<'t>(
    x: Tensor<'t>,
    p: &EsaParams,
    bound: &BoundParams<'t>,
    mask: &AttentionMask,
    tape: &'t Tape,
) -> Result<Tensor<'t>> {
    let v = zero_suppressed_rows(x.linear(bound[p.w_v.w], bound[p.w_v.b])?, mask, tape)?;
    let v = gnconv_forward(v, gnconv_of(p)?, bound)?;
    attend_with_value(x, x, v, p, bound, mask, tape)
}

/// Serial fusion: the plain attention output feeds the convolution.
pub fn serial_fusion_forward<'t>(
    x: Tensor<'t>,
    p: &EsaParams,
    bound: &BoundParams<'t>,
    mask: &AttentionMask,
    tape: &'t Tape,
) -> Result<Tensor<'t>> {
    let base = plain_attention_forward(x, p, bound, mask, tape)?;
    let base = zero_suppressed_rows(base, mask, tape)?;
    gnconv_forward(base, gnconv_of(p)?, bound)
}

/// Parallel fusion: plain attention output plus the convolution of the
/// block input, summed elementwise.
pub fn parallel_fusion_forward<'t>(
    x: Tensor<'t>,
    p: &EsaParams,
    bound: &BoundParams<'t>,
    mask: &AttentionMask,
    tape: &'t Tape,
) -> Result<Tensor<'t>> {
    let base = plain_attention_forward(x, p, bound, mask, tape)?;
    let branch = gnconv_forward(zero_suppressed_rows(x, mask, tape)?, gnconv_of(p)?, bound)?;
    base.add(branch)
}

/// Dispatch on the block's fusion mode.
pub fn attention_block<'t>(
    x: Tensor<'t>,
    p: &EsaParams,
    bound: &BoundParams<'t>,
    mask: &AttentionMask,
    tape: &'t Tape,
) -> Result<Tensor<'t>> {
    match p.fusion {
        FusionMode::Internal => esa_forward(x, p, bound, mask, tape),
        FusionMode::Serial => serial_fusion_forward(x, p, bound, mask, tape),
        FusionMode::Parallel => parallel_fusion_forward(x, p, bound, mask, tape),
        FusionMode::None => plain_attention_forward(x, p, bound, mask, tape),
    }
}
