//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker relies only on forward evaluation: for each coordinate it
//! probes `(f(x+h) - f(x-h)) / 2h` with `h = 1e-5` in double precision and
//! compares against the gradient the tape produced. Relative error uses a
//! small floor so exactly-zero gradients tolerate probe noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::esa::{
    attention_matrix, esa_forward, parallel_fusion_forward, plain_attention_forward,
    serial_fusion_forward, AttentionMask, EsaParams, FusionMode,
};
use crate::gnconv::{gconv_forward, gnconv_forward, GnConvParams};
use crate::model::{build_model, ModelConfig};
use crate::parallel::batch_map;
use crate::params::{BoundParams, ParamBuilder, ParamStore};
use crate::tensor::{PadMode, Tape, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl CheckReport {
    pub fn ok(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

fn fold_max(results: Vec<Result<f64>>) -> Result<f64> {
    let mut max = 0.0f64;
    for r in results {
        max = max.max(r?);
    }
    Ok(max)
}

/// Check a loss built from free leaf tensors. Returns the worst relative
/// error over every coordinate of every input.
pub fn check_inputs(
    inputs: &[(Vec<usize>, Vec<f64>)],
    build: impl for<'t> Fn(&'t Tape, &[Tensor<'t>]) -> Result<Tensor<'t>> + Sync,
) -> Result<f64> {
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Tensor> = inputs
            .iter()
            .map(|(shape, data)| tape.var(data.clone(), shape))
            .collect::<Result<_>>()?;
        let loss = build(&tape, &vars)?;
        loss.backward()?;
        vars.iter()
            .zip(inputs)
            .map(|(v, (_, data))| v.grad().unwrap_or_else(|| vec![0.0; data.len()]))
            .collect()
    };
    let eval = |probe: &[(Vec<usize>, Vec<f64>)]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Tensor> = probe
            .iter()
            .map(|(shape, data)| tape.var(data.clone(), shape))
            .collect::<Result<_>>()?;
        build(&tape, &vars)?.item()
    };
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, (_, data))| (0..data.len()).map(move |j| (i, j)))
        .collect();
    let results = batch_map(&coords, |&(i, j)| -> Result<f64> {
        let mut plus = inputs.to_vec();
        plus[i].1[j] += FD_STEP;
        let mut minus = inputs.to_vec();
        minus[i].1[j] -= FD_STEP;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
        Ok(rel_err(analytic[i][j], numeric))
    });
    fold_max(results)
}

/// Check a loss built from every parameter of a store. Returns the worst
/// relative error over every parameter coordinate.
pub fn check_params(
    store: &ParamStore,
    build: impl for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Tensor<'t>> + Sync,
) -> Result<f64> {
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let bound = store.bind(&tape)?;
        let loss = build(&tape, &bound)?;
        loss.backward()?;
        bound.gradients(store)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let bound = s.bind(&tape)?;
        build(&tape, &bound)?.item()
    };
    let coords: Vec<(usize, usize)> = store
        .entries()
        .iter()
        .enumerate()
        .flat_map(|(i, e)| (0..e.numel()).map(move |j| (i, j)))
        .collect();
    let results = batch_map(&coords, |&(i, j)| -> Result<f64> {
        let mut plus = store.clone();
        plus.value_mut_at(i)[j] += FD_STEP;
        let mut minus = store.clone();
        minus.value_mut_at(i)[j] -= FD_STEP;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
        Ok(rel_err(analytic[i][j], numeric))
    });
    fold_max(results)
}

fn rand_data(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Random values bounded away from zero, for kinked activations.
fn rand_data_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.05..1.0)
        })
        .collect()
}

/// Random values with pairwise spread, keeping normalization denominators
/// well away from the probe step.
fn rand_data_spread(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| rng.gen_range(-0.04..0.04) + 0.3 * (i % 7) as f64 - 0.9)
        .collect()
}

/// Reduce an arbitrary tensor to a scalar with fixed random weights, so
/// every output coordinate influences the loss.
fn weighted_sum<'t>(tape: &'t Tape, x: Tensor<'t>, weights: &[f64]) -> Result<Tensor<'t>> {
    let w = tape.constant(weights.to_vec(), &x.shape())?;
    Ok(x.mul(w)?.sum_all())
}

const INSTANCES: usize = 20;

/// Per-primitive finite-difference suite, at least [`INSTANCES`] random
/// small shapes each.
pub fn check_primitives(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut push = |name: &str, err: f64| {
        reports.push(CheckReport {
            name: name.to_string(),
            max_rel_err: err,
            threshold: PRIMITIVE_TOL,
        });
    };

    let mut max = 0.0f64;
    for _ in 0..INSTANCES {
        let (m, k, n) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        );
        let inputs = vec![
            (vec![m, k], rand_data(&mut rng, m * k)),
            (vec![k, n], rand_data(&mut rng, k * n)),
        ];
        let w = rand_data(&mut rng, m * n);
        max = max.max(check_inputs(&inputs, |t, v| {
            weighted_sum(t, v[0].matmul(v[1])?, &w)
        })?);
    }
    push("matmul", max);

    let mut max = 0.0f64;
    for i in 0..INSTANCES {
        let (b, m, k, n) = (
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
        );
        // Alternate between equal batch extents and a broadcast rhs.
        let rhs_shape = if i % 2 == 0 { vec![b, k, n] } else { vec![k, n] };
        let rhs_len = rhs_shape.iter().product();
        let inputs = vec![
            (vec![b, m, k], rand_data(&mut rng, b * m * k)),
            (rhs_shape, rand_data(&mut rng, rhs_len)),
        ];
        let w = rand_data(&mut rng, b * m * n);
        max = max.max(check_inputs(&inputs, |t, v| {
            weighted_sum(t, v[0].matmul(v[1])?, &w)
        })?);
    }
    push("matmul_batched", max);

    let mut max = 0.0f64;
    for _ in 0..INSTANCES {
        let (t_len, d_in, d_out) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        );
        let inputs = vec![
            (vec![t_len, d_in], rand_data(&mut rng, t_len * d_in)),
            (vec![d_in, d_out], rand_data(&mut rng, d_in * d_out)),
            (vec![d_out], rand_data(&mut rng, d_out)),
        ];
        let w = rand_data(&mut rng, t_len * d_out);
        max = max.max(check_inputs(&inputs, |t, v| {
            weighted_sum(t, v[0].linear(v[1], v[2])?, &w)
        })?);
    }
    push("linear", max);

    for (name, op) in [
        ("add", 0usize),
        ("elementwise_mul", 1),
        ("scale", 2),
        ("relu", 3),
    ] {
        let mut max = 0.0f64;
        for _ in 0..INSTANCES {
            let n = rng.gen_range(1..=8);
            let factor = rng.gen_range(-2.0..2.0);
            let inputs = match op {
                0 | 1 => vec![
                    (vec![n], rand_data(&mut rng, n)),
                    (vec![n], rand_data(&mut rng, n)),
                ],
                3 => vec![(vec![n], rand_data_off_zero(&mut rng, n))],
                _ => vec![(vec![n], rand_data(&mut rng, n))],
            };
            let w = rand_data(&mut rng, n);
            max = max.max(check_inputs(&inputs, |t, v| {
                let y = match op {
                    0 => v[0].add(v[1])?,
                    1 => v[0].mul(v[1])?,
                    2 => v[0].scale(factor),
                    _ => v[0].relu(),
                };
                weighted_sum(t, y, &w)
            })?);
        }
        push(name, max);
    }

    let mut max = 0.0f64;
    for _ in 0..INSTANCES {
        let (rows, d) = (rng.gen_range(1..=3), rng.gen_range(1..=5));
        let inputs = vec![(vec![rows, d], rand_data(&mut rng, rows * d))];
        let w = rand_data(&mut rng, rows * d);
        max = max.max(check_inputs(&inputs, |t, v| {
            weighted_sum(t, v[0].softmax_lastdim()?, &w)
        })?);
    }
    push("softmax_lastdim", max);

    for (name, pad) in [
        ("depthwise_conv1d_same", PadMode::Same),
        ("depthwise_conv1d_causal", PadMode::Causal),
    ] {
        let mut max = 0.0f64;
        for _ in 0..INSTANCES {
            let (t_len, c) = (rng.gen_range(1..=5), rng.gen_range(1..=3));
            let k_max = match pad {
                PadMode::Same => (2 * t_len + 1).min(5),
                PadMode::Causal => 5,
            };
            let k = rng.gen_range(1..=k_max);
            let inputs = vec![
                (vec![t_len, c], rand_data(&mut rng, t_len * c)),
                (vec![c, k], rand_data(&mut rng, c * k)),
                (vec![c], rand_data(&mut rng, c)),
            ];
            let w = rand_data(&mut rng, t_len * c);
            max = max.max(check_inputs(&inputs, |t, v| {
                weighted_sum(t, v[0].depthwise_conv1d(v[1], v[2], pad)?, &w)
            })?);
        }
        push(name, max);
    }

    let mut max = 0.0f64;
    for _ in 0..INSTANCES {
        let (rows, d) = (rng.gen_range(1..=3), rng.gen_range(2..=6));
        let inputs = vec![
            (vec![rows, d], rand_data_spread(&mut rng, rows * d)),
            (vec![d], rand_data(&mut rng, d)),
            (vec![d], rand_data(&mut rng, d)),
        ];
        let w = rand_data(&mut rng, rows * d);
        max = max.max(check_inputs(&inputs, |t, v| {
            weighted_sum(t, v[0].layer_norm(v[1], v[2], 1e-12)?, &w)
        })?);
    }
    push("layer_norm", max);

    let mut max = 0.0f64;
    for _ in 0..INSTANCES {
        let d = rng.gen_range(2..=6);
        let rows = rng.gen_range(1..=3);
        let start = rng.gen_range(0..d - 1);
        let width = rng.gen_range(1..=d - start);
        let inputs = vec![(vec![rows, d], rand_data(&mut rng, rows * d))];
        let w = rand_data(&mut rng, rows * width);
        max = max.max(check_inputs(&inputs, |t, v| {
            weighted_sum(t, v[0].slice_lastdim(start, width)?, &w)
        })?);
    }
    push("slice_lastdim", max);

    let mut max = 0.0f64;
    for _ in 0..INSTANCES {
        let rows = rng.gen_range(1..=3);
        let (da, db) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let inputs = vec![
            (vec![rows, da], rand_data(&mut rng, rows * da)),
            (vec![rows, db], rand_data(&mut rng, rows * db)),
        ];
        let w = rand_data(&mut rng, rows * (da + db));
        max = max.max(check_inputs(&inputs, |t, v| {
            weighted_sum(t, Tensor::concat_lastdim(&[v[0], v[1]])?, &w)
        })?);
    }
    push("concat_lastdim", max);

    let mut max = 0.0f64;
    for i in 0..INSTANCES {
        let (a, b, c) = (
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
        );
        let axes = match i % 3 {
            0 => [1, 0, 2],
            1 => [2, 1, 0],
            _ => [1, 2, 0],
        };
        let inputs = vec![(vec![a, b, c], rand_data(&mut rng, a * b * c))];
        let w = rand_data(&mut rng, a * b * c);
        max = max.max(check_inputs(&inputs, |t, v| {
            let y = v[0].permute(&axes)?.reshape(&[a * b * c])?;
            weighted_sum(t, y, &w)
        })?);
    }
    push("permute_reshape", max);

    let mut max = 0.0f64;
    for _ in 0..INSTANCES {
        let (vocab, d, t_len) = (
            rng.gen_range(2..=5),
            rng.gen_range(1..=4),
            rng.gen_range(1..=5),
        );
        let ids: Vec<usize> = (0..t_len).map(|_| rng.gen_range(0..vocab)).collect();
        let inputs = vec![(vec![vocab, d], rand_data(&mut rng, vocab * d))];
        let w = rand_data(&mut rng, t_len * d);
        max = max.max(check_inputs(&inputs, |t, v| {
            weighted_sum(t, v[0].embedding(&ids)?, &w)
        })?);
    }
    push("embedding", max);

    for (name, smoothing) in [("cross_entropy", 0.0), ("cross_entropy_smoothed", 0.1)] {
        let mut max = 0.0f64;
        for i in 0..INSTANCES {
            let (t_len, vocab) = (rng.gen_range(2..=4), rng.gen_range(2..=5));
            let mut targets: Vec<usize> =
                (0..t_len).map(|_| rng.gen_range(1..vocab)).collect();
            if i % 3 == 0 {
                targets[0] = 0; // exercises the ignored-position path
            }
            let inputs = vec![(vec![t_len, vocab], rand_data(&mut rng, t_len * vocab))];
            max = max.max(check_inputs(&inputs, |_, v| {
                v[0].cross_entropy_smoothed(&targets, Some(0), smoothing)
            })?);
        }
        push(name, max);
    }

    let mut max = 0.0f64;
    for _ in 0..INSTANCES {
        let n = rng.gen_range(1..=8);
        let inputs = vec![(vec![n], rand_data(&mut rng, n))];
        max = max.max(check_inputs(&inputs, |_, v| Ok(v[0].sum_all()))?);
    }
    push("sum_all", max);

    Ok(reports)
}

fn gnconv_store(
    rng: &mut ChaCha8Rng,
    dim: usize,
    order: usize,
    kernel: usize,
    alpha: f64,
    causal: bool,
    t_len: usize,
) -> Result<(ParamStore, GnConvParams, crate::params::ParamId)> {
    let mut store = ParamStore::new();
    let mut pb = ParamBuilder::new(&mut store, rng);
    let x = pb.uniform("x", &[t_len, dim], 1.0);
    let params = GnConvParams::build(&mut pb, dim, order, kernel, alpha, causal)?;
    Ok((store, params, x))
}

/// End-to-end checks through the gated-convolution blocks.
pub fn check_gnconv(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let t_len = 4;

    let mut max = 0.0f64;
    let (store, params, x) = gnconv_store(&mut rng, 8, 1, 3, 1.0, false, t_len)?;
    let w = rand_data(&mut rng, t_len * 8);
    max = max.max(check_params(&store, |tape, bound| {
        weighted_sum(tape, gconv_forward(bound[x], &params, bound)?, &w)
    })?);
    reports.push(CheckReport {
        name: "gconv_forward".into(),
        max_rel_err: max,
        threshold: PRIMITIVE_TOL,
    });

    let mut max = 0.0f64;
    for (order, causal) in [(1, false), (2, false), (3, false), (2, true)] {
        let (store, params, x) = gnconv_store(&mut rng, 8, order, 3, 1.3, causal, t_len)?;
        let w = rand_data(&mut rng, t_len * 8);
        max = max.max(check_params(&store, |tape, bound| {
            weighted_sum(tape, gnconv_forward(bound[x], &params, bound)?, &w)
        })?);
    }
    reports.push(CheckReport {
        name: "gnconv_forward".into(),
        max_rel_err: max,
        threshold: PRIMITIVE_TOL,
    });
    Ok(reports)
}

/// Checks through the attention block in every fusion mode.
pub fn check_esa(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let (t_len, dim, heads, d) = (4usize, 8usize, 2usize, 4usize);

    let mut store = ParamStore::new();
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let q = pb.uniform("q", &[heads, t_len, d], 1.0);
    let k = pb.uniform("k", &[heads, t_len, d], 1.0);
    let mask = AttentionMask::causal(t_len);
    let w = rand_data(&mut rng, heads * t_len * t_len);
    let err = check_params(&store, |tape, bound| {
        weighted_sum(tape, attention_matrix(bound[q], bound[k], &mask, tape)?, &w)
    })?;
    reports.push(CheckReport {
        name: "attention_matrix".into(),
        max_rel_err: err,
        threshold: PRIMITIVE_TOL,
    });

    for (name, fusion) in [
        ("esa_forward", FusionMode::Internal),
        ("serial_fusion_forward", FusionMode::Serial),
        ("parallel_fusion_forward", FusionMode::Parallel),
        ("plain_attention_forward", FusionMode::None),
    ] {
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let x = pb.uniform("x", &[t_len, dim], 1.0);
        let params = pb.scoped("attn", |pb| {
            EsaParams::build(pb, dim, heads, fusion, 2, 3, 1.0, false)
        })?;
        let mask = AttentionMask::key_padding(t_len, &[true, true, true, false])?;
        let w = rand_data(&mut rng, t_len * dim);
        let err = check_params(&store, |tape, bound| {
            let y = match fusion {
                FusionMode::Internal => esa_forward(bound[x], &params, bound, &mask, tape)?,
                FusionMode::Serial => serial_fusion_forward(bound[x], &params, bound, &mask, tape)?,
                FusionMode::Parallel => {
                    parallel_fusion_forward(bound[x], &params, bound, &mask, tape)?
                }
                FusionMode::None => plain_attention_forward(bound[x], &params, bound, &mask, tape)?,
            };
            weighted_sum(tape, y, &w)
        })?;
        reports.push(CheckReport {
            name: name.into(),
            max_rel_err: err,
            threshold: PRIMITIVE_TOL,
        });
    }
    Ok(reports)
}

/// Whole-model check: teacher-forced cross entropy through a tiny
/// encoder-decoder with enhanced attention on both sides.
pub fn check_model(_seed: u64) -> Result<Vec<CheckReport>> {
    let config = ModelConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        model_dim: 8,
        heads: 2,
        ffn_dim: 16,
        order: 2,
        kernel: 3,
        alpha: 1.0,
        fusion: FusionMode::Internal,
        esa_in_encoder: true,
        esa_in_decoder: true,
        source_vocab: 11,
        target_vocab: 11,
        max_len: 8,
        dropout: 0.0,
        pad_id: 0,
    };
    let model = build_model(&config, 7)?;
    let source = [3usize, 5, 8, 4];
    let decoder_input = [1usize, 3, 5, 8];
    let labels = [3usize, 5, 8, 2];
    let err = check_params(model.store(), |tape, bound| {
        let logits = model.forward_on(tape, bound, &source, &decoder_input, None)?;
        logits.cross_entropy(&labels, Some(0))
    })?;
    Ok(vec![CheckReport {
        name: "full_model".into(),
        max_rel_err: err,
        threshold: MODEL_TOL,
    }])
}

/// Run the named suite: `tensor`, `gnconv`, `esa`, `model` or `all`.
pub fn run_module(module: &str, seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    match module {
        "tensor" => reports.extend(check_primitives(seed)?),
        "gnconv" => reports.extend(check_gnconv(seed)?),
        "esa" => reports.extend(check_esa(seed)?),
        "model" => reports.extend(check_model(seed)?),
        "all" => {
            reports.extend(check_primitives(seed)?);
            reports.extend(check_gnconv(seed)?);
            reports.extend(check_esa(seed)?);
            reports.extend(check_model(seed)?);
        }
        other => {
            return Err(crate::error::Error::InvalidConfig {
                field: "module",
                reason: format!("unknown module `{other}` (tensor|gnconv|esa|model)"),
            })
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floors_near_zero() {
        assert!(rel_err(0.0, 1e-9) < 1e-4);
        assert!(rel_err(1.0, 2.0) > 0.4);
    }

    #[test]
    fn checker_accepts_smooth_ops_and_flags_probe_disagreement() {
        let inputs = vec![(vec![3], vec![0.3, -0.7, 0.9])];
        let err = check_inputs(&inputs, |_, v| Ok(v[0].mul(v[0]).unwrap().sum_all())).unwrap();
        assert!(err < PRIMITIVE_TOL, "smooth op reported {err}");

        // A kink sitting inside the probe interval makes the secant
        // disagree with the one-sided analytic gradient.
        let kinked = vec![(vec![1], vec![FD_STEP / 2.0])];
        let err = check_inputs(&kinked, |_, v| Ok(v[0].relu().sum_all())).unwrap();
        assert!(err > PRIMITIVE_TOL, "kink went unnoticed: {err}");
    }
}
