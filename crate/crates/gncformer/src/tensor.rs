//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor created during a forward pass; [`Tensor`]
//! handles are cheap copies indexing into it. Operations record themselves
//! on the tape in execution order, and [`Tensor::backward`] on a scalar
//! walks the record in reverse, accumulating each tensor's gradient exactly
//! once per use.
//!
//! A tape and its tensors are a single-threaded unit of work. Independent
//! tapes may run on independent threads; parameter data shared between
//! tapes is `Arc`ed and never mutated while bound.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Padding placement for depthwise 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Zero padding split as evenly as possible; the extra zero goes on the
    /// right for even kernel widths. Output length equals input length.
    Same,
    /// All K-1 zeros on the left, so position t only sees positions <= t.
    Causal,
}

struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Linear { x: usize, w: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: f64 },
    Relu { x: usize },
    SoftmaxLast { x: usize },
    DepthwiseConv1d { x: usize, kernels: usize, bias: usize, pad: PadMode },
    LayerNorm { x: usize, gain: usize, shift: usize, eps: f64 },
    SliceLast { x: usize, start: usize, width: usize },
    ConcatLast { parts: Vec<usize> },
    Permute { x: usize, axes: Vec<usize> },
    Reshape { x: usize },
    Embedding { table: usize, ids: Vec<usize> },
    SumAll { x: usize },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        ignore: Option<usize>,
        smoothing: f64,
    },
}

/// Ordered record of executed primitive operations and their value buffers.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn product(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    if product(shape) != len {
        return Err(Error::DataLengthMismatch {
            op,
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool, op: Op) -> Tensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        self.grads.borrow_mut().push(None);
        Tensor {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// New leaf that participates in gradient computation.
    pub fn var(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        check_shape("leaf", shape, data.len())?;
        Ok(self.push(shape.to_vec(), Arc::new(data), true, Op::Leaf))
    }

    /// New leaf excluded from gradient computation.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        check_shape("leaf", shape, data.len())?;
        Ok(self.push(shape.to_vec(), Arc::new(data), false, Op::Leaf))
    }

    /// Leaf over shared storage, e.g. model parameters bound to this tape.
    pub fn leaf_shared(&self, data: Arc<Vec<f64>>, shape: &[usize], requires_grad: bool) -> Result<Tensor<'_>> {
        check_shape("leaf", shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn scalar(&self, value: f64) -> Tensor<'_> {
        self.push(vec![1], Arc::new(vec![value]), false, Op::Leaf)
    }

    /// Reset every accumulated gradient on this tape.
    pub fn zero_grads(&self) {
        for g in self.grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }
}

impl<'t> Tensor<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(self) -> usize {
        product(&self.tape.nodes.borrow()[self.id].shape)
    }

    pub fn data(self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].data.as_ref().clone()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(self) -> Result<f64> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        if product(&node.shape) != 1 {
            return Err(Error::NonScalarLoss {
                shape: node.shape.clone(),
            });
        }
        Ok(node.data[0])
    }

    /// Accumulated gradient, if any backward pass reached this tensor.
    pub fn grad(self) -> Option<Vec<f64>> {
        self.tape.grads.borrow()[self.id].clone()
    }

    fn assert_same_tape(self, other: Tensor<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "tensors belong to different tapes"
        );
    }

    fn with_node<R>(self, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id])
    }
}

// ---------------------------------------------------------------------------
// shape helpers
// ---------------------------------------------------------------------------

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast two sets of leading batch extents, or None if incompatible.
fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![1; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Flat block offsets into `dims`-shaped operand for every index of the
/// broadcast batch `out_dims`; broadcast axes contribute stride zero.
fn batch_offsets(out_dims: &[usize], dims: &[usize]) -> Vec<usize> {
    let count = product(out_dims);
    let rank = out_dims.len();
    let pad = rank - dims.len();
    let own_strides = strides(dims);
    let mut offsets = Vec::with_capacity(count);
    for flat in 0..count {
        let mut rem = flat;
        let mut off = 0;
        for i in 0..rank {
            let tail: usize = out_dims[i + 1..].iter().product();
            let coord = rem / tail;
            rem %= tail;
            if i >= pad && dims[i - pad] != 1 {
                off += coord * own_strides[i - pad];
            }
        }
        offsets.push(off);
    }
    offsets
}

fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..p * n + n];
            let orow = &mut out[i * n..i * n + n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,k] += a[m,n] * b[k,n]^T
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..i * n + n];
        for p in 0..k {
            let brow = &b[p * n..p * n + n];
            let mut s = 0.0;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            out[i * k + p] += s;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..i * n + n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..p * n + n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn permute_copy(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let out_count = product(&out_shape);
    let mut out = vec![0.0; out_count];
    let out_strides = strides(&out_shape);
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src = 0;
        for i in 0..out_shape.len() {
            let coord = rem / out_strides[i];
            rem %= out_strides[i];
            src += coord * in_strides[axes[i]];
        }
        *slot = data[src];
    }
    (out_shape, out)
}

fn conv_left_pad(kernel: usize, pad: PadMode) -> usize {
    match pad {
        PadMode::Same => (kernel - 1) / 2,
        PadMode::Causal => kernel - 1,
    }
}

// ---------------------------------------------------------------------------
// forward operations
// ---------------------------------------------------------------------------

impl<'t> Tensor<'t> {
    /// Matrix product over the two trailing dimensions. Leading batch
    /// extents broadcast against each other.
    pub fn matmul(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.assert_same_tape(rhs);
        let (out_shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let an = &nodes[self.id];
            let bn = &nodes[rhs.id];
            let mismatch = || Error::ShapeMismatch {
                op: "matmul",
                lhs: an.shape.clone(),
                rhs: bn.shape.clone(),
            };
            if an.shape.len() < 2 || bn.shape.len() < 2 {
                return Err(mismatch());
            }
            let (m, ka) = (an.shape[an.shape.len() - 2], an.shape[an.shape.len() - 1]);
            let (kb, n) = (bn.shape[bn.shape.len() - 2], bn.shape[bn.shape.len() - 1]);
            if ka != kb {
                return Err(mismatch());
            }
            let batch = broadcast_batch(
                &an.shape[..an.shape.len() - 2],
                &bn.shape[..bn.shape.len() - 2],
            )
            .ok_or_else(mismatch)?;
            let a_off = batch_offsets(&batch, &an.shape[..an.shape.len() - 2]);
            let b_off = batch_offsets(&batch, &bn.shape[..bn.shape.len() - 2]);
            let mut data = vec![0.0; product(&batch) * m * n];
            for (bi, (&ao, &bo)) in a_off.iter().zip(&b_off).enumerate() {
                gemm(
                    &an.data[ao * m * ka..(ao + 1) * m * ka],
                    &bn.data[bo * ka * n..(bo + 1) * ka * n],
                    &mut data[bi * m * n..(bi + 1) * m * n],
                    m,
                    ka,
                    n,
                );
            }
            let mut out_shape = batch;
            out_shape.push(m);
            out_shape.push(n);
            (out_shape, data, an.requires_grad || bn.requires_grad)
        };
        Ok(self.tape.push(
            out_shape,
            Arc::new(data),
            rg,
            Op::Matmul { a: self.id, b: rhs.id },
        ))
    }

    /// Affine map along the last dimension: `x . w + b`.
    pub fn linear(self, w: Tensor<'t>, b: Tensor<'t>) -> Result<Tensor<'t>> {
        self.assert_same_tape(w);
        self.assert_same_tape(b);
        let (out_shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let xn = &nodes[self.id];
            let wn = &nodes[w.id];
            let bn = &nodes[b.id];
            let mismatch = || Error::ShapeMismatch {
                op: "linear",
                lhs: xn.shape.clone(),
                rhs: wn.shape.clone(),
            };
            if xn.shape.is_empty() || wn.shape.len() != 2 {
                return Err(mismatch());
            }
            let d_in = *xn.shape.last().unwrap();
            if wn.shape[0] != d_in {
                return Err(mismatch());
            }
            let d_out = wn.shape[1];
            if bn.shape != [d_out] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: wn.shape.clone(),
                    rhs: bn.shape.clone(),
                });
            }
            let rows = product(&xn.shape) / d_in;
            let mut data = vec![0.0; rows * d_out];
            for r in 0..rows {
                data[r * d_out..(r + 1) * d_out].copy_from_slice(&bn.data);
            }
            gemm(&xn.data, &wn.data, &mut data, rows, d_in, d_out);
            let mut out_shape = xn.shape.clone();
            *out_shape.last_mut().unwrap() = d_out;
            (
                out_shape,
                data,
                xn.requires_grad || wn.requires_grad || bn.requires_grad,
            )
        };
        Ok(self.tape.push(
            out_shape,
            Arc::new(data),
            rg,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.id,
            },
        ))
    }

    pub fn add(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary_elementwise(rhs, "add", |a, b| a + b, |a, b| Op::Add { a, b })
    }

    /// Hadamard product of same-shape tensors.
    pub fn mul(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary_elementwise(rhs, "elementwise_mul", |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    fn binary_elementwise(
        self,
        rhs: Tensor<'t>,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make_op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Tensor<'t>> {
        self.assert_same_tape(rhs);
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let an = &nodes[self.id];
            let bn = &nodes[rhs.id];
            if an.shape != bn.shape {
                return Err(Error::ShapeMismatch {
                    op: op_name,
                    lhs: an.shape.clone(),
                    rhs: bn.shape.clone(),
                });
            }
            let data: Vec<f64> = an.data.iter().zip(bn.data.iter()).map(|(&a, &b)| f(a, b)).collect();
            (an.shape.clone(), data, an.requires_grad || bn.requires_grad)
        };
        Ok(self
            .tape
            .push(shape, Arc::new(data), rg, make_op(self.id, rhs.id)))
    }

    pub fn scale(self, factor: f64) -> Tensor<'t> {
        let (shape, data, rg) = self.with_node(|n| {
            (
                n.shape.clone(),
                n.data.iter().map(|&v| v * factor).collect::<Vec<_>>(),
                n.requires_grad,
            )
        });
        self.tape.push(
            shape,
            Arc::new(data),
            rg,
            Op::Scale {
                x: self.id,
                factor,
            },
        )
    }

    pub fn relu(self) -> Tensor<'t> {
        let (shape, data, rg) = self.with_node(|n| {
            (
                n.shape.clone(),
                n.data.iter().map(|&v| v.max(0.0)).collect::<Vec<_>>(),
                n.requires_grad,
            )
        });
        self.tape
            .push(shape, Arc::new(data), rg, Op::Relu { x: self.id })
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_lastdim(self) -> Result<Tensor<'t>> {
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let xn = &nodes[self.id];
            if xn.shape.is_empty() {
                return Err(Error::InvalidShape {
                    op: "softmax_lastdim",
                    shape: xn.shape.clone(),
                    reason: "rank must be >= 1".into(),
                });
            }
            if xn.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput {
                    op: "softmax_lastdim",
                });
            }
            let d = *xn.shape.last().unwrap();
            let mut data = vec![0.0; xn.data.len()];
            for (row_in, row_out) in xn.data.chunks(d).zip(data.chunks_mut(d)) {
                let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, &v) in row_out.iter_mut().zip(row_in) {
                    *o = (v - max).exp();
                    sum += *o;
                }
                for o in row_out.iter_mut() {
                    *o /= sum;
                }
            }
            (xn.shape.clone(), data, xn.requires_grad)
        };
        Ok(self
            .tape
            .push(shape, Arc::new(data), rg, Op::SoftmaxLast { x: self.id }))
    }

    /// Per-channel 1-D convolution of `self: [T, C]` with `kernels: [C, K]`
    /// plus `bias: [C]`. No cross-channel mixing; output length equals T.
    pub fn depthwise_conv1d(
        self,
        kernels: Tensor<'t>,
        bias: Tensor<'t>,
        pad: PadMode,
    ) -> Result<Tensor<'t>> {
        self.assert_same_tape(kernels);
        self.assert_same_tape(bias);
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let xn = &nodes[self.id];
            let kn = &nodes[kernels.id];
            let bn = &nodes[bias.id];
            if xn.shape.len() != 2 || kn.shape.len() != 2 || xn.shape[1] != kn.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "depthwise_conv1d",
                    lhs: xn.shape.clone(),
                    rhs: kn.shape.clone(),
                });
            }
            let (t_len, channels) = (xn.shape[0], xn.shape[1]);
            let k = kn.shape[1];
            if bn.shape != [channels] {
                return Err(Error::ShapeMismatch {
                    op: "depthwise_conv1d bias",
                    lhs: vec![channels],
                    rhs: bn.shape.clone(),
                });
            }
            if pad == PadMode::Same && k > 2 * t_len + 1 {
                return Err(Error::KernelTooWide {
                    kernel: k,
                    seq_len: t_len,
                    limit: 2 * t_len + 1,
                });
            }
            let left = conv_left_pad(k, pad);
            let mut data = vec![0.0; t_len * channels];
            for t in 0..t_len {
                for c in 0..channels {
                    let mut acc = bn.data[c];
                    for j in 0..k {
                        let src = t as isize + j as isize - left as isize;
                        if src >= 0 && (src as usize) < t_len {
                            acc += xn.data[src as usize * channels + c] * kn.data[c * k + j];
                        }
                    }
                    data[t * channels + c] = acc;
                }
            }
            (
                xn.shape.clone(),
                data,
                xn.requires_grad || kn.requires_grad || bn.requires_grad,
            )
        };
        Ok(self.tape.push(
            shape,
            Arc::new(data),
            rg,
            Op::DepthwiseConv1d {
                x: self.id,
                kernels: kernels.id,
                bias: bias.id,
                pad,
            },
        ))
    }

    /// Normalize each last-dimension slice to zero mean and unit variance,
    /// then scale by `gain` and shift by `shift`.
    pub fn layer_norm(self, gain: Tensor<'t>, shift: Tensor<'t>, eps: f64) -> Result<Tensor<'t>> {
        self.assert_same_tape(gain);
        self.assert_same_tape(shift);
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let xn = &nodes[self.id];
            let gn = &nodes[gain.id];
            let sn = &nodes[shift.id];
            if xn.shape.is_empty() {
                return Err(Error::InvalidShape {
                    op: "layer_norm",
                    shape: xn.shape.clone(),
                    reason: "rank must be >= 1".into(),
                });
            }
            let d = *xn.shape.last().unwrap();
            if gn.shape != [d] || sn.shape != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xn.shape.clone(),
                    rhs: gn.shape.clone(),
                });
            }
            let mut data = vec![0.0; xn.data.len()];
            for (row_in, row_out) in xn.data.chunks(d).zip(data.chunks_mut(d)) {
                let mean = row_in.iter().sum::<f64>() / d as f64;
                let var = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for i in 0..d {
                    row_out[i] = (row_in[i] - mean) * inv * gn.data[i] + sn.data[i];
                }
            }
            (
                xn.shape.clone(),
                data,
                xn.requires_grad || gn.requires_grad || sn.requires_grad,
            )
        };
        Ok(self.tape.push(
            shape,
            Arc::new(data),
            rg,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                shift: shift.id,
                eps,
            },
        ))
    }

    /// Contiguous slice `[start, start+width)` along the last dimension.
    pub fn slice_lastdim(self, start: usize, width: usize) -> Result<Tensor<'t>> {
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let xn = &nodes[self.id];
            let d = *xn.shape.last().ok_or_else(|| Error::InvalidShape {
                op: "slice_lastdim",
                shape: vec![],
                reason: "rank must be >= 1".into(),
            })?;
            if width == 0 || start + width > d {
                return Err(Error::InvalidShape {
                    op: "slice_lastdim",
                    shape: xn.shape.clone(),
                    reason: format!("slice [{start}, {}) out of range", start + width),
                });
            }
            let rows = product(&xn.shape) / d;
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                data.extend_from_slice(&xn.data[r * d + start..r * d + start + width]);
            }
            let mut shape = xn.shape.clone();
            *shape.last_mut().unwrap() = width;
            (shape, data, xn.requires_grad)
        };
        Ok(self.tape.push(
            shape,
            Arc::new(data),
            rg,
            Op::SliceLast {
                x: self.id,
                start,
                width,
            },
        ))
    }

    /// Split the last dimension into contiguous slices of the given widths.
    /// Concatenating the outputs in order reproduces the input exactly.
    pub fn split_lastdim(self, widths: &[usize]) -> Result<Vec<Tensor<'t>>> {
        let d = *self.shape().last().ok_or_else(|| Error::InvalidShape {
            op: "split_lastdim",
            shape: vec![],
            reason: "rank must be >= 1".into(),
        })?;
        let sum: usize = widths.iter().sum();
        if sum != d {
            return Err(Error::WidthSumMismatch {
                got: sum,
                expected: d,
            });
        }
        let mut out = Vec::with_capacity(widths.len());
        let mut start = 0;
        for &w in widths {
            out.push(self.slice_lastdim(start, w)?);
            start += w;
        }
        Ok(out)
    }

    /// Concatenate tensors along the last dimension.
    pub fn concat_lastdim(parts: &[Tensor<'t>]) -> Result<Tensor<'t>> {
        let first = *parts.first().ok_or_else(|| Error::InvalidShape {
            op: "concat_lastdim",
            shape: vec![],
            reason: "no parts".into(),
        })?;
        for &p in &parts[1..] {
            first.assert_same_tape(p);
        }
        let tape = first.tape;
        let (shape, data, rg) = {
            let nodes = tape.nodes.borrow();
            let lead = &nodes[first.id].shape[..nodes[first.id].shape.len() - 1];
            let mut total = 0;
            let mut rg = false;
            for &p in parts {
                let pn = &nodes[p.id];
                if &pn.shape[..pn.shape.len() - 1] != lead {
                    return Err(Error::ShapeMismatch {
                        op: "concat_lastdim",
                        lhs: nodes[first.id].shape.clone(),
                        rhs: pn.shape.clone(),
                    });
                }
                total += *pn.shape.last().unwrap();
                rg |= pn.requires_grad;
            }
            let rows = product(lead);
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &p in parts {
                    let pn = &nodes[p.id];
                    let w = *pn.shape.last().unwrap();
                    data.extend_from_slice(&pn.data[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            (shape, data, rg)
        };
        Ok(tape.push(
            shape,
            Arc::new(data),
            rg,
            Op::ConcatLast {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        ))
    }

    /// Reorder dimensions; `axes` must be a permutation of `0..rank`.
    pub fn permute(self, axes: &[usize]) -> Result<Tensor<'t>> {
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let xn = &nodes[self.id];
            let rank = xn.shape.len();
            let mut seen = vec![false; rank];
            if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
                return Err(Error::InvalidShape {
                    op: "permute",
                    shape: xn.shape.clone(),
                    reason: format!("axes {axes:?} is not a permutation of 0..{rank}"),
                });
            }
            let (shape, data) = permute_copy(&xn.data, &xn.shape, axes);
            (shape, data, xn.requires_grad)
        };
        Ok(self.tape.push(
            shape,
            Arc::new(data),
            rg,
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swap the two trailing dimensions.
    pub fn transpose_last2(self) -> Result<Tensor<'t>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::InvalidShape {
                op: "transpose_last2",
                shape: self.shape(),
                reason: "rank must be >= 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Same data, new shape with equal element count. Shares storage.
    pub fn reshape(self, new_shape: &[usize]) -> Result<Tensor<'t>> {
        let (data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let xn = &nodes[self.id];
            check_shape("reshape", new_shape, xn.data.len())?;
            (Arc::clone(&xn.data), xn.requires_grad)
        };
        Ok(self
            .tape
            .push(new_shape.to_vec(), data, rg, Op::Reshape { x: self.id }))
    }

    /// Gather rows of an embedding table `self: [V, D]` by token id.
    pub fn embedding(self, ids: &[usize]) -> Result<Tensor<'t>> {
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let tn = &nodes[self.id];
            if tn.shape.len() != 2 {
                return Err(Error::InvalidShape {
                    op: "embedding",
                    shape: tn.shape.clone(),
                    reason: "table must be rank 2".into(),
                });
            }
            let (vocab, dim) = (tn.shape[0], tn.shape[1]);
            let mut data = Vec::with_capacity(ids.len() * dim);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::TokenOutOfRange { token: id, vocab });
                }
                data.extend_from_slice(&tn.data[id * dim..(id + 1) * dim]);
            }
            (vec![ids.len(), dim], data, tn.requires_grad)
        };
        Ok(self.tape.push(
            shape,
            Arc::new(data),
            rg,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(self) -> Tensor<'t> {
        let (total, rg) = self.with_node(|n| (n.data.iter().sum::<f64>(), n.requires_grad));
        self.tape
            .push(vec![1], Arc::new(vec![total]), rg, Op::SumAll { x: self.id })
    }

    /// Mean negative log-softmax probability of `targets` under logits
    /// `self: [T, V]`, skipping positions whose target equals `ignore`.
    pub fn cross_entropy(self, targets: &[usize], ignore: Option<usize>) -> Result<Tensor<'t>> {
        self.cross_entropy_smoothed(targets, ignore, 0.0)
    }

    /// Label-smoothed cross entropy: each target distributes `smoothing`
    /// mass uniformly over the vocabulary. `smoothing = 0` is plain NLL.
    pub fn cross_entropy_smoothed(
        self,
        targets: &[usize],
        ignore: Option<usize>,
        smoothing: f64,
    ) -> Result<Tensor<'t>> {
        let (loss, rg) = {
            let nodes = self.tape.nodes.borrow();
            let ln = &nodes[self.id];
            if ln.shape.len() != 2 || ln.shape[0] != targets.len() {
                return Err(Error::InvalidShape {
                    op: "cross_entropy",
                    shape: ln.shape.clone(),
                    reason: format!("expected [T={}, V] logits", targets.len()),
                });
            }
            let vocab = ln.shape[1];
            let mut total = 0.0;
            let mut count = 0usize;
            for (t, &target) in targets.iter().enumerate() {
                if ignore == Some(target) {
                    continue;
                }
                if target >= vocab {
                    return Err(Error::TokenOutOfRange {
                        token: target,
                        vocab,
                    });
                }
                let row = &ln.data[t * vocab..(t + 1) * vocab];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                let mean_logp = row.iter().map(|&v| v - lse).sum::<f64>() / vocab as f64;
                total -= (1.0 - smoothing) * (row[target] - lse) + smoothing * mean_logp;
                count += 1;
            }
            if count == 0 {
                return Err(Error::AllTargetsIgnored);
            }
            (total / count as f64, ln.requires_grad)
        };
        Ok(self.tape.push(
            vec![1],
            Arc::new(vec![loss]),
            rg,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                ignore,
                smoothing,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// backward pass
// ---------------------------------------------------------------------------

impl<'t> Tensor<'t> {
    /// Reverse sweep from a scalar loss. Gradients of every tensor that
    /// requires them accumulate additively across calls; use
    /// [`Tape::zero_grads`] to reset between steps.
    pub fn backward(self) -> Result<()> {
        let nodes = self.tape.nodes.borrow();
        let loss = &nodes[self.id];
        if product(&loss.shape) != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss.shape.clone(),
            });
        }
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        adjoint[self.id] = Some(vec![1.0]);
        for i in (0..=self.id).rev() {
            let Some(g) = adjoint[i].take() else { continue };
            if !nodes[i].requires_grad {
                continue;
            }
            {
                let mut grads = self.tape.grads.borrow_mut();
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, gi) in acc.iter_mut().zip(&g) {
                            *a += gi;
                        }
                    }
                    slot => *slot = Some(g.clone()),
                }
            }
            backprop(&nodes, i, &g, &mut adjoint);
        }
        Ok(())
    }
}

fn add_into(adjoint: &mut [Option<Vec<f64>>], nodes: &[Node], target: usize, inc: Vec<f64>) {
    if !nodes[target].requires_grad {
        return;
    }
    match &mut adjoint[target] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&inc) {
                *a += v;
            }
        }
        slot => *slot = Some(inc),
    }
}

fn backprop(nodes: &[Node], out: usize, g: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
    match &nodes[out].op {
        Op::Leaf => {}

        Op::Matmul { a, b } => {
            let an = &nodes[*a];
            let bn = &nodes[*b];
            let (m, k) = (
                an.shape[an.shape.len() - 2],
                an.shape[an.shape.len() - 1],
            );
            let n = bn.shape[bn.shape.len() - 1];
            let batch = &nodes[out].shape[..nodes[out].shape.len() - 2];
            let a_off = batch_offsets(batch, &an.shape[..an.shape.len() - 2]);
            let b_off = batch_offsets(batch, &bn.shape[..bn.shape.len() - 2]);
            let mut da = vec![0.0; an.data.len()];
            let mut db = vec![0.0; bn.data.len()];
            for (bi, (&ao, &bo)) in a_off.iter().zip(&b_off).enumerate() {
                let gout = &g[bi * m * n..(bi + 1) * m * n];
                gemm_nt(
                    gout,
                    &bn.data[bo * k * n..(bo + 1) * k * n],
                    &mut da[ao * m * k..(ao + 1) * m * k],
                    m,
                    n,
                    k,
                );
                gemm_tn(
                    &an.data[ao * m * k..(ao + 1) * m * k],
                    gout,
                    &mut db[bo * k * n..(bo + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
            add_into(adjoint, nodes, *a, da);
            add_into(adjoint, nodes, *b, db);
        }

        Op::Linear { x, w, b } => {
            let xn = &nodes[*x];
            let wn = &nodes[*w];
            let (d_in, d_out) = (wn.shape[0], wn.shape[1]);
            let rows = xn.data.len() / d_in;
            let mut dx = vec![0.0; xn.data.len()];
            gemm_nt(g, &wn.data, &mut dx, rows, d_out, d_in);
            let mut dw = vec![0.0; wn.data.len()];
            gemm_tn(&xn.data, g, &mut dw, rows, d_in, d_out);
            let mut db = vec![0.0; d_out];
            for r in 0..rows {
                for j in 0..d_out {
                    db[j] += g[r * d_out + j];
                }
            }
            add_into(adjoint, nodes, *x, dx);
            add_into(adjoint, nodes, *w, dw);
            add_into(adjoint, nodes, *b, db);
        }

        Op::Add { a, b } => {
            add_into(adjoint, nodes, *a, g.to_vec());
            add_into(adjoint, nodes, *b, g.to_vec());
        }

        Op::Mul { a, b } => {
            let da: Vec<f64> = g.iter().zip(nodes[*b].data.iter()).map(|(&g, &b)| g * b).collect();
            let db: Vec<f64> = g.iter().zip(nodes[*a].data.iter()).map(|(&g, &a)| g * a).collect();
            add_into(adjoint, nodes, *a, da);
            add_into(adjoint, nodes, *b, db);
        }

        Op::Scale { x, factor } => {
            add_into(adjoint, nodes, *x, g.iter().map(|&v| v * factor).collect());
        }

        Op::Relu { x } => {
            let dx: Vec<f64> = g
                .iter()
                .zip(nodes[*x].data.iter())
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect();
            add_into(adjoint, nodes, *x, dx);
        }

        Op::SoftmaxLast { x } => {
            let y = &nodes[out].data;
            let d = *nodes[out].shape.last().unwrap();
            let mut dx = vec![0.0; y.len()];
            for ((yrow, grow), drow) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                let dot: f64 = yrow.iter().zip(grow).map(|(&y, &g)| y * g).sum();
                for i in 0..d {
                    drow[i] = yrow[i] * (grow[i] - dot);
                }
            }
            add_into(adjoint, nodes, *x, dx);
        }

        Op::DepthwiseConv1d {
            x,
            kernels,
            bias,
            pad,
        } => {
            let xn = &nodes[*x];
            let kn = &nodes[*kernels];
            let (t_len, channels) = (xn.shape[0], xn.shape[1]);
            let k = kn.shape[1];
            let left = conv_left_pad(k, *pad);
            let mut dx = vec![0.0; xn.data.len()];
            let mut dk = vec![0.0; kn.data.len()];
            let mut db = vec![0.0; channels];
            for t in 0..t_len {
                for c in 0..channels {
                    let gv = g[t * channels + c];
                    db[c] += gv;
                    for j in 0..k {
                        let src = t as isize + j as isize - left as isize;
                        if src >= 0 && (src as usize) < t_len {
                            let s = src as usize;
                            dx[s * channels + c] += gv * kn.data[c * k + j];
                            dk[c * k + j] += gv * xn.data[s * channels + c];
                        }
                    }
                }
            }
            add_into(adjoint, nodes, *x, dx);
            add_into(adjoint, nodes, *kernels, dk);
            add_into(adjoint, nodes, *bias, db);
        }

        Op::LayerNorm { x, gain, shift, eps } => {
            let xn = &nodes[*x];
            let gn = &nodes[*gain];
            let d = *xn.shape.last().unwrap();
            let rows = xn.data.len() / d;
            let mut dx = vec![0.0; xn.data.len()];
            let mut dgain = vec![0.0; d];
            let mut dshift = vec![0.0; d];
            for r in 0..rows {
                let xrow = &xn.data[r * d..(r + 1) * d];
                let grow = &g[r * d..(r + 1) * d];
                let mean = xrow.iter().sum::<f64>() / d as f64;
                let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = xrow.iter().map(|&v| (v - mean) * inv).collect();
                let gg: Vec<f64> = grow.iter().zip(gn.data.iter()).map(|(&g, &w)| g * w).collect();
                let mean_gg = gg.iter().sum::<f64>() / d as f64;
                let mean_gg_xhat = gg.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
                for i in 0..d {
                    dgain[i] += grow[i] * xhat[i];
                    dshift[i] += grow[i];
                    dx[r * d + i] = inv * (gg[i] - mean_gg - xhat[i] * mean_gg_xhat);
                }
            }
            add_into(adjoint, nodes, *x, dx);
            add_into(adjoint, nodes, *gain, dgain);
            add_into(adjoint, nodes, *shift, dshift);
        }

        Op::SliceLast { x, start, width } => {
            let xn = &nodes[*x];
            let d = *xn.shape.last().unwrap();
            let rows = xn.data.len() / d;
            let mut dx = vec![0.0; xn.data.len()];
            for r in 0..rows {
                dx[r * d + start..r * d + start + width].copy_from_slice(&g[r * width..(r + 1) * width]);
            }
            add_into(adjoint, nodes, *x, dx);
        }

        Op::ConcatLast { parts } => {
            let total = *nodes[out].shape.last().unwrap();
            let rows = nodes[out].data.len() / total;
            let mut offset = 0;
            for &p in parts {
                let w = *nodes[p].shape.last().unwrap();
                let mut dp = vec![0.0; rows * w];
                for r in 0..rows {
                    dp[r * w..(r + 1) * w].copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                }
                add_into(adjoint, nodes, p, dp);
                offset += w;
            }
        }

        Op::Permute { x, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let (_, dx) = permute_copy(g, &nodes[out].shape, &inverse);
            add_into(adjoint, nodes, *x, dx);
        }

        Op::Reshape { x } => {
            add_into(adjoint, nodes, *x, g.to_vec());
        }

        Op::Embedding { table, ids } => {
            let tn = &nodes[*table];
            let dim = tn.shape[1];
            let mut dt = vec![0.0; tn.data.len()];
            for (t, &id) in ids.iter().enumerate() {
                for i in 0..dim {
                    dt[id * dim + i] += g[t * dim + i];
                }
            }
            add_into(adjoint, nodes, *table, dt);
        }

        Op::SumAll { x } => {
            add_into(adjoint, nodes, *x, vec![g[0]; nodes[*x].data.len()]);
        }

        Op::CrossEntropy {
            logits,
            targets,
            ignore,
            smoothing,
        } => {
            let ln = &nodes[*logits];
            let vocab = ln.shape[1];
            let count = targets.iter().filter(|&&t| *ignore != Some(t)).count();
            let scale = g[0] / count as f64;
            let mut dl = vec![0.0; ln.data.len()];
            for (t, &target) in targets.iter().enumerate() {
                if *ignore == Some(target) {
                    continue;
                }
                let row = &ln.data[t * vocab..(t + 1) * vocab];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                let drow = &mut dl[t * vocab..(t + 1) * vocab];
                for (o, &v) in drow.iter_mut().zip(row) {
                    *o = (v - max).exp();
                    sum += *o;
                }
                for (c, o) in drow.iter_mut().enumerate() {
                    let p = *o / sum;
                    let q = if c == target { 1.0 - smoothing } else { 0.0 } + smoothing / vocab as f64;
                    *o = scale * (p - q);
                }
            }
            add_into(adjoint, nodes, *logits, dl);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len(), "length mismatch");
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!(
                (a - e).abs() <= tol,
                "index {i}: actual {a} vs expected {e}"
            );
        }
    }

    #[test]
    fn matmul_identity_leaves_operand_unchanged() {
        let tape = Tape::new();
        let eye = tape
            .constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3])
            .unwrap();
        let a = tape
            .var(vec![2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 7.0, 0.0, 1.0], &[3, 3])
            .unwrap();
        let out = eye.matmul(a).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn matmul_hand_expansion_2x2_by_2x1() {
        let tape = Tape::new();
        let a = tape.var(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = tape.var(vec![0.0, 1.0], &[2, 1]).unwrap();
        let out = a.matmul(b).unwrap();
        assert_eq!(out.data(), vec![2.0, 4.0]);
        assert_eq!(out.shape(), vec![2, 1]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.var(vec![0.0; 6], &[2, 3]).unwrap();
        let b = tape.var(vec![0.0; 8], &[4, 2]).unwrap();
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_leading_batch_extents() {
        let tape = Tape::new();
        let a = tape
            .var(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[2, 2, 2])
            .unwrap();
        let b = tape.var(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let out = a.matmul(b).unwrap();
        assert_eq!(out.shape(), vec![2, 2, 2]);
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn softmax_uniform_and_overflow_safe() {
        let tape = Tape::new();
        let x = tape.var(vec![0.0; 4], &[4]).unwrap();
        assert_close(&x.softmax_lastdim().unwrap().data(), &[0.25; 4], 1e-15);

        let big = tape.var(vec![1000.0, 1000.0], &[2]).unwrap();
        assert_close(&big.softmax_lastdim().unwrap().data(), &[0.5, 0.5], 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape
            .var(vec![0.3, -1.0, 2.0, 0.0, 4.0, -3.0], &[2, 3])
            .unwrap();
        let y = x.softmax_lastdim().unwrap().data();
        for row in y.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let tape = Tape::new();
        let x = tape.var(vec![1.0, f64::NAN], &[2]).unwrap();
        assert!(matches!(
            x.softmax_lastdim(),
            Err(Error::NonFiniteInput { .. })
        ));
    }

    #[test]
    fn elementwise_mul_examples() {
        let tape = Tape::new();
        let a = tape.var(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let ones = tape.constant(vec![1.0; 3], &[3]).unwrap();
        assert_eq!(a.mul(ones).unwrap().data(), vec![1.0, 2.0, 3.0]);

        let b = tape.var(vec![4.0, 5.0, 6.0], &[3]).unwrap();
        let out = a.mul(b).unwrap();
        assert_eq!(out.data(), vec![4.0, 10.0, 18.0]);

        out.sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![4.0, 5.0, 6.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let tape = Tape::new();
        let x = tape.var(vec![1.0, 2.0], &[2]).unwrap();
        let eye = tape.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let zero = tape.constant(vec![0.0, 0.0], &[2]).unwrap();
        assert_eq!(x.linear(eye, zero).unwrap().data(), vec![1.0, 2.0]);

        let ones_w = tape.constant(vec![1.0; 6], &[2, 3]).unwrap();
        let zero3 = tape.constant(vec![0.0; 3], &[3]).unwrap();
        let x2 = tape.var(vec![1.0, 1.0], &[2]).unwrap();
        assert_eq!(x2.linear(ones_w, zero3).unwrap().data(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn depthwise_conv_identity_kernel() {
        let tape = Tape::new();
        let x = tape.var(vec![3.0, -1.0, 2.0, 5.0], &[2, 2]).unwrap();
        let k = tape.constant(vec![1.0, 1.0], &[2, 1]).unwrap();
        let b = tape.constant(vec![0.0, 0.0], &[2]).unwrap();
        let y = x.depthwise_conv1d(k, b, PadMode::Same).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn depthwise_conv_hand_convolution() {
        // x = [1,2,3] single channel, box kernel [1,1,1], same padding.
        let tape = Tape::new();
        let x = tape.var(vec![1.0, 2.0, 3.0], &[3, 1]).unwrap();
        let k = tape.constant(vec![1.0, 1.0, 1.0], &[1, 3]).unwrap();
        let b = tape.constant(vec![0.0], &[1]).unwrap();
        let y = x.depthwise_conv1d(k, b, PadMode::Same).unwrap();
        assert_eq!(y.data(), vec![3.0, 6.0, 5.0]);
    }

    #[test]
    fn depthwise_conv_impulse_recovers_reversed_kernel() {
        // One-hot input at index 2 of 5; K=3 same-pad places the reversed
        // kernel centered at the hot index.
        let tape = Tape::new();
        let x = tape
            .var(vec![0.0, 0.0, 1.0, 0.0, 0.0], &[5, 1])
            .unwrap();
        let k = tape.constant(vec![0.5, -1.0, 2.0], &[1, 3]).unwrap();
        let b = tape.constant(vec![0.0], &[1]).unwrap();
        let y = x.depthwise_conv1d(k, b, PadMode::Same).unwrap();
        assert_eq!(y.data(), vec![0.0, 2.0, -1.0, 0.5, 0.0]);
    }

    #[test]
    fn depthwise_conv_even_kernel_pads_extra_right() {
        // K=2, left pad 0, right pad 1: y[t] = x[t]*k0 + x[t+1]*k1.
        let tape = Tape::new();
        let x = tape.var(vec![1.0, 2.0, 3.0], &[3, 1]).unwrap();
        let k = tape.constant(vec![10.0, 1.0], &[1, 2]).unwrap();
        let b = tape.constant(vec![0.0], &[1]).unwrap();
        let y = x.depthwise_conv1d(k, b, PadMode::Same).unwrap();
        assert_eq!(y.data(), vec![12.0, 23.0, 30.0]);
    }

    #[test]
    fn depthwise_conv_causal_only_looks_back() {
        let tape = Tape::new();
        let x = tape.var(vec![1.0, 2.0, 3.0], &[3, 1]).unwrap();
        let k = tape.constant(vec![1.0, 1.0, 1.0], &[1, 3]).unwrap();
        let b = tape.constant(vec![0.0], &[1]).unwrap();
        let y = x.depthwise_conv1d(k, b, PadMode::Causal).unwrap();
        assert_eq!(y.data(), vec![1.0, 3.0, 6.0]);
    }

    #[test]
    fn depthwise_conv_rejects_kernel_wider_than_2t_plus_1() {
        let tape = Tape::new();
        let x = tape.var(vec![1.0, 2.0], &[2, 1]).unwrap();
        let k = tape.constant(vec![1.0; 6], &[1, 6]).unwrap();
        let b = tape.constant(vec![0.0], &[1]).unwrap();
        assert!(matches!(
            x.depthwise_conv1d(k, b, PadMode::Same),
            Err(Error::KernelTooWide { kernel: 6, .. })
        ));
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_shift() {
        let tape = Tape::new();
        let x = tape.var(vec![5.0, 5.0, 5.0], &[3]).unwrap();
        let gain = tape.constant(vec![1.0; 3], &[3]).unwrap();
        let shift = tape.constant(vec![0.0; 3], &[3]).unwrap();
        let y = x.layer_norm(gain, shift, 1e-12).unwrap();
        assert_close(&y.data(), &[0.0; 3], 1e-12);
    }

    #[test]
    fn layer_norm_two_point_row() {
        let tape = Tape::new();
        let x = tape.var(vec![1.0, 3.0], &[2]).unwrap();
        let gain = tape.constant(vec![1.0; 2], &[2]).unwrap();
        let shift = tape.constant(vec![0.0; 2], &[2]).unwrap();
        let y = x.layer_norm(gain, shift, 1e-12).unwrap();
        assert_close(&y.data(), &[-1.0, 1.0], 1e-6);
    }

    #[test]
    fn split_concat_round_trip_is_bit_exact() {
        let tape = Tape::new();
        let x = tape
            .var(vec![0.1, 0.2, 0.3, 0.4, 1.1, 1.2, 1.3, 1.4], &[2, 4])
            .unwrap();
        let parts = x.split_lastdim(&[2, 2]).unwrap();
        assert_eq!(parts[0].data(), vec![0.1, 0.2, 1.1, 1.2]);
        assert_eq!(parts[1].data(), vec![0.3, 0.4, 1.3, 1.4]);
        let back = Tensor::concat_lastdim(&parts).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn split_rejects_bad_width_sum() {
        let tape = Tape::new();
        let x = tape.var(vec![0.0; 4], &[4]).unwrap();
        assert!(matches!(
            x.split_lastdim(&[1, 2]),
            Err(Error::WidthSumMismatch { got: 3, expected: 4 })
        ));
    }

    #[test]
    fn split_routes_gradients_to_slices() {
        let tape = Tape::new();
        let x = tape.var(vec![1.0, 2.0, 3.0, 4.0], &[4]).unwrap();
        let parts = x.split_lastdim(&[2, 2]).unwrap();
        // loss = sum(first slice) only: gradient 1 on slice, 0 elsewhere.
        parts[0].sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let tape = Tape::new();
        let logits = tape.var(vec![0.0; 10], &[2, 5]).unwrap();
        let loss = logits.cross_entropy(&[3, 1], None).unwrap();
        assert!((loss.item().unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_logit_is_near_zero() {
        let tape = Tape::new();
        let logits = tape.var(vec![0.0, 1e4, 0.0], &[1, 3]).unwrap();
        let loss = logits.cross_entropy(&[1], None).unwrap();
        assert!(loss.item().unwrap().abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_ignores_marked_targets() {
        let tape = Tape::new();
        let logits = tape.var(vec![0.0; 6], &[2, 3]).unwrap();
        let loss = logits.cross_entropy(&[2, 0], Some(0)).unwrap();
        assert!((loss.item().unwrap() - 3f64.ln()).abs() < 1e-12);
        let all_ignored = logits.cross_entropy(&[0, 0], Some(0));
        assert!(matches!(all_ignored, Err(Error::AllTargetsIgnored)));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let tape = Tape::new();
        let logits = tape.var(vec![0.0; 3], &[1, 3]).unwrap();
        assert!(matches!(
            logits.cross_entropy(&[3], None),
            Err(Error::TokenOutOfRange { token: 3, vocab: 3 })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.var(vec![3.0, -2.0, 0.5], &[3]).unwrap();
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn backward_of_square_sum_is_two_x() {
        let tape = Tape::new();
        let x = tape.var(vec![1.0, -4.0, 2.5], &[3]).unwrap();
        x.mul(x).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -8.0, 5.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let x = tape.var(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.backward(), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.var(vec![2.0], &[1]).unwrap();
        let loss = x.mul(x).unwrap().sum_all();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
        tape.zero_grads();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn diamond_graph_accumulates_once_per_use() {
        // y = x*x + x: dy/dx = 2x + 1.
        let tape = Tape::new();
        let x = tape.var(vec![3.0], &[1]).unwrap();
        let sq = x.mul(x).unwrap();
        let y = sq.add(x).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.var(vec![1.0, 2.0], &[2]).unwrap();
        let c = tape.constant(vec![5.0, 6.0], &[2]).unwrap();
        x.mul(c).unwrap().sum_all().backward().unwrap();
        assert!(c.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![5.0, 6.0]);
    }

    #[test]
    fn permute_and_reshape_round_trip() {
        let tape = Tape::new();
        let x = tape
            .var((0..24).map(|v| v as f64).collect(), &[2, 3, 4])
            .unwrap();
        let p = x.permute(&[1, 2, 0]).unwrap();
        assert_eq!(p.shape(), vec![3, 4, 2]);
        let back = p.permute(&[2, 0, 1]).unwrap();
        assert_eq!(back.data(), x.data());
        let r = x.reshape(&[6, 4]).unwrap();
        assert_eq!(r.data(), x.data());
        assert!(x.reshape(&[5, 5]).is_err());
    }

    #[test]
    fn transpose_last2_matches_manual() {
        let tape = Tape::new();
        let x = tape.var(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let t = x.transpose_last2().unwrap();
        assert_eq!(t.shape(), vec![3, 2]);
        assert_eq!(t.data(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let tape = Tape::new();
        let table = tape
            .var(vec![0.0, 0.1, 1.0, 1.1, 2.0, 2.1], &[3, 2])
            .unwrap();
        let e = table.embedding(&[2, 0, 2]).unwrap();
        assert_eq!(e.data(), vec![2.0, 2.1, 0.0, 0.1, 2.0, 2.1]);
        e.sum_all().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(
            table.embedding(&[3]),
            Err(Error::TokenOutOfRange { token: 3, vocab: 3 })
        ));
    }

    #[test]
    fn leaf_rejects_length_mismatch_and_zero_extent() {
        let tape = Tape::new();
        assert!(tape.var(vec![1.0; 3], &[2, 2]).is_err());
        assert!(tape.var(vec![], &[0]).is_err());
    }
}
