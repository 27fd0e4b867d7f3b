//! Gated convolution and its recursive generalization.
//!
//! A gated convolution widens its input from D to 2D channels, splits the
//! result into a gate half and a convolution half, depthwise-convolves the
//! latter and multiplies the two elementwise. The recursive form repeats
//! the gating `order` times: the widened projection is split into a seed
//! `M_0` plus one slice `N_k` per step, and step k computes
//!
//! ```text
//! M_{k+1} = DWConv_k(N_k) * project_k(M_k) / alpha
//! ```
//!
//! where `project_k` matches the running width `D_{k-1}` to `D_k` (the
//! identity at k = 0, where no narrower predecessor exists). Widths follow
//! `D_k = D / 2^(order-k-1)`, so each step doubles the working width, the
//! widened projection totals exactly 2D, and `M_order` comes out at full
//! width D before the closing projection.

use crate::error::{Error, Result};
use crate::params::{Affine, BoundParams, Conv, ParamBuilder, ParamId, ParamStore};
use crate::tensor::{PadMode, Tensor};

/// Split widths `[M_0, N_0, ..., N_{order-1}]` for the widened projection:
/// `D_0` twice, then `D_k = dim / 2^(order-k-1)` for k = 1..order.
/// The widths always sum to `2 * dim`.
pub fn dimension_schedule(dim: usize, order: usize) -> Result<Vec<usize>> {
    if order == 0 || order > 32 {
        return Err(Error::InvalidConfig {
            field: "order",
            reason: format!("order {order} must be in 1..=32"),
        });
    }
    let divisor = 1usize << (order - 1);
    if dim == 0 || dim % divisor != 0 {
        return Err(Error::ScheduleIndivisible {
            dim,
            order,
            divisor,
        });
    }
    let mut widths = Vec::with_capacity(order + 1);
    widths.push(dim / divisor);
    for k in 0..order {
        widths.push(dim >> (order - k - 1));
    }
    Ok(widths)
}

/// Parameter layout of one recursive gated convolution block over width
/// `dim`: the widening projection, one depthwise kernel set per step, the
/// width-matching projections for steps 1.., and the closing projection.
#[derive(Debug, Clone)]
pub struct GnConvParams {
    pub order: usize,
    pub dim: usize,
    pub kernel: usize,
    /// Scaling divisor applied at every recursion step.
    pub alpha: f64,
    /// Causal blocks convolve with left-only padding so position t never
    /// sees positions after t.
    pub causal: bool,
    pub schedule: Vec<usize>,
    pub linear_in: Affine,
    pub dwconv: Vec<Conv>,
    pub projs: Vec<Affine>,
    pub linear_out: Affine,
}

impl GnConvParams {
    pub fn build(
        pb: &mut ParamBuilder<'_>,
        dim: usize,
        order: usize,
        kernel: usize,
        alpha: f64,
        causal: bool,
    ) -> Result<Self> {
        if kernel == 0 {
            return Err(Error::InvalidConfig {
                field: "kernel",
                reason: "kernel width must be >= 1".into(),
            });
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidConfig {
                field: "alpha",
                reason: format!("alpha {alpha} must be a positive finite value"),
            });
        }
        let schedule = dimension_schedule(dim, order)?;
        let linear_in = pb.affine("linear_in", dim, 2 * dim);
        let mut dwconv = Vec::with_capacity(order);
        for k in 0..order {
            dwconv.push(pb.depthwise(&format!("dwconv.{k}"), schedule[k + 1], kernel));
        }
        let mut projs = Vec::with_capacity(order - 1);
        for k in 1..order {
            projs.push(pb.affine(&format!("proj.{k}"), schedule[k], schedule[k + 1]));
        }
        let linear_out = pb.affine("linear_out", dim, dim);
        Ok(GnConvParams {
            order,
            dim,
            kernel,
            alpha,
            causal,
            schedule,
            linear_in,
            dwconv,
            projs,
            linear_out,
        })
    }

    pub fn pad_mode(&self) -> PadMode {
        if self.causal {
            PadMode::Causal
        } else {
            PadMode::Same
        }
    }

    /// Every parameter of this block, in allocation order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.linear_in.w, self.linear_in.b];
        for c in &self.dwconv {
            ids.push(c.kernels);
            ids.push(c.bias);
        }
        for p in &self.projs {
            ids.push(p.w);
            ids.push(p.b);
        }
        ids.push(self.linear_out.w);
        ids.push(self.linear_out.b);
        ids
    }

    /// Overwrite this block's parameters so it computes the identity map:
    /// the gate half passes the input through, the convolution half is
    /// forced to ones, and the closing projection is the identity.
    /// Requires order 1, kernel width 1 and alpha 1.
    pub fn make_identity(&self, store: &mut ParamStore) -> Result<()> {
        if self.order != 1 || self.kernel != 1 || self.alpha != 1.0 {
            return Err(Error::InvalidConfig {
                field: "gnconv",
                reason: format!(
                    "identity configuration needs order 1, kernel 1, alpha 1 (got {}, {}, {})",
                    self.order, self.kernel, self.alpha
                ),
            });
        }
        let d = self.dim;
        let w_in = store.value_mut(self.linear_in.w);
        w_in.fill(0.0);
        for i in 0..d {
            w_in[i * 2 * d + i] = 1.0;
        }
        let b_in = store.value_mut(self.linear_in.b);
        b_in[..d].fill(0.0);
        b_in[d..].fill(1.0);
        store.value_mut(self.dwconv[0].kernels).fill(1.0);
        store.value_mut(self.dwconv[0].bias).fill(0.0);
        let w_out = store.value_mut(self.linear_out.w);
        w_out.fill(0.0);
        for i in 0..d {
            w_out[i * d + i] = 1.0;
        }
        store.value_mut(self.linear_out.b).fill(0.0);
        Ok(())
    }
}

/// Recursive gated convolution of `x: [T, dim]`, returning `[T, dim]`.
pub fn gnconv_forward<'t>(
    x: Tensor<'t>,
    p: &GnConvParams,
    bound: &BoundParams<'t>,
) -> Result<Tensor<'t>> {
    let pad = p.pad_mode();
    let widened = x.linear(bound[p.linear_in.w], bound[p.linear_in.b])?;
    let parts = widened.split_lastdim(&p.schedule)?;
    let mut m = parts[0];
    for k in 0..p.order {
        let conv = parts[k + 1]
            .depthwise_conv1d(bound[p.dwconv[k].kernels], bound[p.dwconv[k].bias], pad)
            .map_err(Error::at_gnconv_stage(k))?;
        let projected = if k == 0 {
            m
        } else {
            let proj = p.projs[k - 1];
            m.linear(bound[proj.w], bound[proj.b])
                .map_err(Error::at_gnconv_stage(k))?
        };
        m = conv
            .mul(projected)
            .map_err(Error::at_gnconv_stage(k))?
            .scale(1.0 / p.alpha);
    }
    m.linear(bound[p.linear_out.w], bound[p.linear_out.b])
}

/// Single-step gated convolution, the order-1 base case written out as a
/// straight line: widen, split in two, convolve one half, gate the other.
/// Agrees bit-exactly with [`gnconv_forward`] on order-1 parameters.
pub fn gconv_forward<'t>(
    x: Tensor<'t>,
    p: &GnConvParams,
    bound: &BoundParams<'t>,
) -> Result<Tensor<'t>> {
    if p.order != 1 {
        return Err(Error::InvalidConfig {
            field: "order",
            reason: format!("gconv_forward needs order 1, got {}", p.order),
        });
    }
    let widened = x.linear(bound[p.linear_in.w], bound[p.linear_in.b])?;
    let halves = widened.split_lastdim(&[p.dim, p.dim])?;
    let conv = halves[1].depthwise_conv1d(
        bound[p.dwconv[0].kernels],
        bound[p.dwconv[0].bias],
        p.pad_mode(),
    )?;
    let gated = conv.mul(halves[0])?.scale(1.0 / p.alpha);
    gated.linear(bound[p.linear_out.w], bound[p.linear_out.b])
}

/// Instantiate a throwaway block and sum its parameter tensor extents.
/// Independent route against [`gnconv_param_count`].
pub fn enumerate_param_count(dim: usize, order: usize, kernel: usize) -> Result<usize> {
    use rand::SeedableRng;
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    GnConvParams::build(&mut pb, dim, order, kernel, 1.0, false)?;
    Ok(store.total_params())
}

/// Closed-form parameter count of one block; must equal enumerating the
/// instantiated parameter tensors.
pub fn gnconv_param_count(dim: usize, order: usize, kernel: usize, with_bias: bool) -> Result<usize> {
    let widths = dimension_schedule(dim, order)?;
    let bias = usize::from(with_bias);
    let mut count = dim * 2 * dim + bias * 2 * dim;
    for k in 0..order {
        count += widths[k + 1] * kernel + bias * widths[k + 1];
    }
    for k in 1..order {
        count += widths[k] * widths[k + 1] + bias * widths[k + 1];
    }
    count += dim * dim + bias * dim;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build_block(
        dim: usize,
        order: usize,
        kernel: usize,
        alpha: f64,
        seed: u64,
    ) -> (ParamStore, GnConvParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let params = GnConvParams::build(&mut pb, dim, order, kernel, alpha, false).unwrap();
        (store, params)
    }

    #[test]
    fn schedule_matches_published_splits() {
        assert_eq!(
            dimension_schedule(256, 5).unwrap(),
            vec![16, 16, 32, 64, 128, 256]
        );
        assert_eq!(dimension_schedule(256, 3).unwrap(), vec![64, 64, 128, 256]);
        assert_eq!(
            dimension_schedule(256, 7).unwrap(),
            vec![4, 4, 8, 16, 32, 64, 128, 256]
        );
        assert_eq!(
            dimension_schedule(256, 9).unwrap(),
            vec![1, 1, 2, 4, 8, 16, 32, 64, 128, 256]
        );
    }

    #[test]
    fn schedule_always_sums_to_twice_dim() {
        for dim in [16usize, 64, 256] {
            for order in 1..=5 {
                let widths = dimension_schedule(dim, order).unwrap();
                assert_eq!(widths.iter().sum::<usize>(), 2 * dim, "dim {dim} order {order}");
                assert_eq!(widths.len(), order + 1);
            }
        }
    }

    #[test]
    fn schedule_rejects_indivisible_dim() {
        let err = dimension_schedule(24, 5).unwrap_err().to_string();
        assert!(err.contains("16") && err.contains("24"), "{err}");
        assert!(dimension_schedule(256, 10).is_err());
        // 2^(4-1) = 8 divides 24, so order 4 at width 24 is legal.
        assert_eq!(dimension_schedule(24, 4).unwrap(), vec![3, 3, 6, 12, 24]);
    }

    #[test]
    fn step_widths_double_up_to_full_dim() {
        // M_{k+1} has width D_k, so the running widths are schedule[1..].
        let widths = dimension_schedule(256, 5).unwrap();
        assert_eq!(&widths[1..], &[16, 32, 64, 128, 256]);
    }

    #[test]
    fn gconv_identity_stack_squares_input() {
        let (mut store, p) = build_block(3, 1, 1, 1.0, 0);
        // linear_in = [I; I] stack, unit kernel, identity linear_out.
        let d = 3;
        let w_in = store.value_mut(p.linear_in.w);
        w_in.fill(0.0);
        for i in 0..d {
            w_in[i * 2 * d + i] = 1.0;
            w_in[i * 2 * d + d + i] = 1.0;
        }
        store.value_mut(p.dwconv[0].kernels).fill(1.0);
        let w_out = store.value_mut(p.linear_out.w);
        w_out.fill(0.0);
        for i in 0..d {
            w_out[i * d + i] = 1.0;
        }
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let x = tape.var(vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0], &[2, 3]).unwrap();
        let y = gconv_forward(x, &p, &bound).unwrap();
        assert_eq!(y.data(), vec![1.0, 4.0, 9.0, 0.25, 16.0, 1.0]);
    }

    #[test]
    fn gconv_zero_input_yields_output_bias() {
        let (mut store, p) = build_block(4, 1, 3, 1.0, 1);
        store
            .value_mut(p.linear_out.b)
            .copy_from_slice(&[0.5, -1.0, 2.0, 0.0]);
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let x = tape.var(vec![0.0; 12], &[3, 4]).unwrap();
        let y = gconv_forward(x, &p, &bound).unwrap();
        // linear_in bias is zero, so every gate is zero and only the
        // closing bias survives.
        for row in y.data().chunks(4) {
            assert_eq!(row, &[0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn order_one_recursion_matches_gconv_bit_exactly() {
        for alpha in [1.0, 1.7] {
            let (store, p) = build_block(8, 1, 3, alpha, 42);
            let tape = Tape::new();
            let bound = store.bind(&tape).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let x_data: Vec<f64> = (0..40).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            let x = tape.var(x_data, &[5, 8]).unwrap();
            let a = gnconv_forward(x, &p, &bound).unwrap();
            let b = gconv_forward(x, &p, &bound).unwrap();
            let (av, bv) = (a.data(), b.data());
            for (x, y) in av.iter().zip(&bv) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn forward_preserves_shape_across_orders() {
        for (dim, order) in [(8, 1), (8, 2), (8, 3), (16, 4), (256, 5)] {
            let (store, p) = build_block(dim, order, 3, 1.0, 3);
            let tape = Tape::new();
            let bound = store.bind(&tape).unwrap();
            let t = 4;
            let x = tape.var(vec![0.3; t * dim], &[t, dim]).unwrap();
            let y = gnconv_forward(x, &p, &bound).unwrap();
            assert_eq!(y.shape(), vec![t, dim]);
        }
    }

    #[test]
    fn doubling_alpha_halves_first_step_and_scales_output() {
        // Freshly built blocks have all-zero biases, so the output scales
        // by exactly (alpha1/alpha2)^order.
        let (store, p1) = build_block(8, 3, 3, 1.0, 11);
        let mut p2 = p1.clone();
        p2.alpha = 2.0;
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_data: Vec<f64> = (0..32).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let x = tape.var(x_data, &[4, 8]).unwrap();
        let y1 = gnconv_forward(x, &p1, &bound).unwrap().data();
        let y2 = gnconv_forward(x, &p2, &bound).unwrap().data();
        let scale = 2f64.powi(p1.order as i32);
        for (a, b) in y1.iter().zip(&y2) {
            assert_eq!(a.to_bits(), (b * scale).to_bits());
        }
    }

    #[test]
    fn wrong_input_width_reports_shapes() {
        let (store, p) = build_block(8, 2, 3, 1.0, 0);
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let x = tape.var(vec![0.0; 12], &[2, 6]).unwrap();
        let err = gnconv_forward(x, &p, &bound).unwrap_err().to_string();
        assert!(err.contains("[2, 6]"), "{err}");
    }

    #[test]
    fn param_count_matches_hand_derived_paper_config() {
        assert_eq!(gnconv_param_count(256, 5, 32, true).unwrap(), 257_744);
        assert_eq!(gnconv_param_count(256, 3, 32, true).unwrap(), 253_504);
        // Component breakdown of the order-5 case.
        let linear_in = 256 * 512 + 512;
        let depthwise = 496 * 33;
        let projections = (16 * 32 + 32) + (32 * 64 + 64) + (64 * 128 + 128) + (128 * 256 + 256);
        let linear_out = 256 * 256 + 256;
        assert_eq!(linear_in, 131_584);
        assert_eq!(depthwise, 16_368);
        assert_eq!(projections, 44_000);
        assert_eq!(linear_out, 65_792);
        assert_eq!(linear_in + depthwise + projections + linear_out, 257_744);
    }

    #[test]
    fn order_spread_stays_under_thirty_thousand_for_six_layers() {
        let n9 = gnconv_param_count(256, 9, 32, true).unwrap();
        let n3 = gnconv_param_count(256, 3, 32, true).unwrap();
        assert!(
            6 * (n9 - n3) < 30_000,
            "spread {} not under 30k",
            6 * (n9 - n3)
        );
    }

    #[test]
    fn closed_form_equals_enumeration() {
        for (dim, order, kernel) in [(8, 1, 1), (8, 2, 3), (16, 3, 7), (64, 4, 7), (256, 5, 32)] {
            let (store, _) = build_block(dim, order, kernel, 1.0, 9);
            assert_eq!(
                store.total_params(),
                gnconv_param_count(dim, order, kernel, true).unwrap(),
                "dim {dim} order {order} kernel {kernel}"
            );
        }
    }

    #[test]
    fn identity_configuration_passes_input_through() {
        let (mut store, p) = build_block(4, 1, 1, 1.0, 2);
        p.make_identity(&mut store).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let x = tape
            .var(vec![0.1, -0.4, 2.0, 1.5, -3.0, 0.0, 0.25, 9.0], &[2, 4])
            .unwrap();
        let y = gnconv_forward(x, &p, &bound).unwrap();
        assert_eq!(y.data(), x.data());
    }
}
