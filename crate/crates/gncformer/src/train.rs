//! Training loop, optimizer, evaluation and ablation drivers.
//!
//! Each batch item runs forward and backward on its own tape, fanned out
//! through [`crate::parallel::batch_map`]; losses and gradients are then
//! reduced in index order, so a training run is bit-reproducible for a
//! given seed regardless of thread count.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::count_parameters;
use crate::checkpoint::save_model;
use crate::error::{Error, Result};
use crate::esa::FusionMode;
use crate::gnconv::dimension_schedule;
use crate::metrics::{evaluate_pairs, EvalMetrics, MetricsRow, MetricsWriter};
use crate::model::{build_model, Dropout, EsaPlacement, GncformerModel, ModelConfig};
use crate::parallel::{batch_map, batch_map_seq};
use crate::params::ParamStore;
use crate::task::{generate_task, Example, TaskSpec, BOS, EOS, PAD};
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub eval_interval: usize,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    /// Stop once validation token accuracy reaches this value.
    pub target_token_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            steps: 3000,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            clip_norm: 5.0,
            label_smoothing: 0.1,
            seed: 0,
            eval_interval: 100,
            metrics_path: PathBuf::from("metrics.csv"),
            checkpoint_path: PathBuf::from("model.gncf"),
            target_token_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &'static str, reason: String| Err(Error::InvalidConfig { field, reason });
        self.model.validate()?;
        if self.steps < self.warmup_steps {
            return fail(
                "warmup_steps",
                format!("warmup {} exceeds steps {}", self.warmup_steps, self.steps),
            );
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be >= 1".into());
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return fail("peak_lr", format!("{} must be positive", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1", "moment decays must be in [0, 1)".into());
        }
        if self.adam_eps <= 0.0 {
            return fail("adam_eps", "must be positive".into());
        }
        if self.clip_norm < 0.0 {
            return fail("clip_norm", "must be >= 0 (0 disables clipping)".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("label_smoothing", "must be in [0, 1)".into());
        }
        if self.eval_interval == 0 {
            return fail("eval_interval", "must be >= 1".into());
        }
        if self.model.source_vocab != self.task.vocab || self.model.target_vocab != self.task.vocab
        {
            return fail(
                "source_vocab",
                format!(
                    "model vocabularies ({}, {}) must equal task vocab {}",
                    self.model.source_vocab, self.model.target_vocab, self.task.vocab
                ),
            );
        }
        if self.task.max_len + 1 > self.model.max_len {
            return fail(
                "max_len",
                format!(
                    "task max_len {} needs model max_len >= {}",
                    self.task.max_len,
                    self.task.max_len + 1
                ),
            );
        }
        Ok(())
    }
}

/// Inverse-square-root schedule with linear warmup: the rate climbs to
/// `peak_lr` over `warmup_steps`, then decays as sqrt(warmup/step).
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = cfg.warmup_steps.max(1) as f64;
    cfg.peak_lr * (s / w).min((w / s).sqrt())
}

/// Adam with bias correction, no weight decay.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.numel()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (idx, g) in grads.iter().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let value = store.value_mut_at(idx);
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `clip`.
/// A clip of zero disables clipping. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Vec<f64>], clip: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|&v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if clip > 0.0 && norm > clip {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

fn dropout_seed(base: u64, step: usize, index: usize) -> u64 {
    (base ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Teacher-forced loss and parameter gradients for one example on its own
/// tape. `dropout` carries (rate, seed) when training-mode noise applies.
pub fn example_gradients(
    model: &GncformerModel,
    example: &Example,
    label_smoothing: f64,
    dropout: Option<(f64, u64)>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let bound = model.store().bind(&tape)?;
    let mut decoder_input = Vec::with_capacity(example.target.len() + 1);
    decoder_input.push(BOS);
    decoder_input.extend_from_slice(&example.target);
    let mut labels = example.target.clone();
    labels.push(EOS);

    let logits = match dropout {
        Some((rate, seed)) if rate > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ctx = Dropout {
                rate,
                rng: &mut rng,
            };
            model.forward_on(&tape, &bound, &example.source, &decoder_input, Some(&mut ctx))?
        }
        _ => model.forward_on(&tape, &bound, &example.source, &decoder_input, None)?,
    };
    let loss = logits.cross_entropy_smoothed(&labels, Some(PAD), label_smoothing)?;
    loss.backward()?;
    Ok((loss.item()?, bound.gradients(model.store())))
}

fn reduce_batch(
    model: &GncformerModel,
    results: Vec<Result<(f64, Vec<Vec<f64>>)>>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let count = results.len().max(1) as f64;
    let mut total_loss = 0.0;
    let mut acc: Vec<Vec<f64>> = model
        .store()
        .entries()
        .iter()
        .map(|e| vec![0.0; e.numel()])
        .collect();
    for r in results {
        let (loss, grads) = r?;
        total_loss += loss;
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    let inv = 1.0 / count;
    total_loss *= inv;
    for a in acc.iter_mut() {
        for x in a.iter_mut() {
            *x *= inv;
        }
    }
    Ok((total_loss, acc))
}

/// Mean loss and mean gradients over a batch, fanned out in parallel and
/// reduced in index order.
pub fn batch_gradients(
    model: &GncformerModel,
    batch: &[&Example],
    label_smoothing: f64,
    dropout_rate: f64,
    dropout_base_seed: u64,
    step: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let items: Vec<(usize, &Example)> = batch.iter().copied().enumerate().collect();
    let results = batch_map(&items, |(idx, ex)| {
        let seed = dropout_seed(dropout_base_seed, step, *idx);
        example_gradients(model, ex, label_smoothing, Some((dropout_rate, seed)))
    });
    reduce_batch(model, results)
}

/// Sequential twin of [`batch_gradients`]; must agree bit-for-bit.
pub fn batch_gradients_seq(
    model: &GncformerModel,
    batch: &[&Example],
    label_smoothing: f64,
    dropout_rate: f64,
    dropout_base_seed: u64,
    step: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let items: Vec<(usize, &Example)> = batch.iter().copied().enumerate().collect();
    let results = batch_map_seq(&items, |(idx, ex)| {
        let seed = dropout_seed(dropout_base_seed, step, *idx);
        example_gradients(model, ex, label_smoothing, Some((dropout_rate, seed)))
    });
    reduce_batch(model, results)
}

/// Mean evaluation-mode loss over a batch, no gradients.
pub fn batch_loss(model: &GncformerModel, batch: &[&Example], label_smoothing: f64) -> Result<f64> {
    let results = batch_map(batch, |ex| -> Result<f64> {
        let tape = Tape::new();
        let bound = model.store().bind(&tape)?;
        let mut decoder_input = vec![BOS];
        decoder_input.extend_from_slice(&ex.target);
        let mut labels = ex.target.clone();
        labels.push(EOS);
        let logits = model.forward_on(&tape, &bound, &ex.source, &decoder_input, None)?;
        logits
            .cross_entropy_smoothed(&labels, Some(PAD), label_smoothing)?
            .item()
    });
    let mut total = 0.0;
    let count = results.len().max(1) as f64;
    for r in results {
        total += r?;
    }
    Ok(total / count)
}

/// Greedy-decode every example and score the hypotheses.
pub fn evaluate(model: &GncformerModel, examples: &[Example]) -> Result<EvalMetrics> {
    let results = batch_map(examples, |ex| {
        model
            .greedy_decode(&ex.source, ex.target.len() + 4, BOS, EOS)
            .map(|hyp| (ex.target.clone(), hyp))
    });
    let mut pairs = Vec::with_capacity(results.len());
    for r in results {
        pairs.push(r?);
    }
    Ok(evaluate_pairs(&pairs))
}

pub struct TrainOutcome {
    pub final_row: MetricsRow,
    pub model: GncformerModel,
    pub stopped_early: bool,
    pub steps_run: usize,
}

/// Teacher-forced training with warmup, gradient clipping and Adam.
/// Appends a metrics row at step 0 and every `eval_interval` steps, and
/// saves the best-validation-accuracy checkpoint to the configured path.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = generate_task(&cfg.task)?;
    let mut model = build_model(&cfg.model, cfg.seed)?;
    let mut adam = Adam::new(model.store());
    let mut writer = MetricsWriter::create(&cfg.metrics_path)?;
    let t0 = Instant::now();

    let first_batch: Vec<&Example> = dataset
        .train
        .iter()
        .take(cfg.batch_size.min(dataset.train.len()))
        .collect();
    let loss0 = batch_loss(&model, &first_batch, cfg.label_smoothing)?;
    let eval0 = evaluate(&model, &dataset.val)?;
    let mut last_row = MetricsRow {
        step: 0,
        loss: loss0,
        token_acc: eval0.token_acc,
        seq_acc: eval0.seq_acc,
        edit_rate: eval0.edit_rate,
        seconds: t0.elapsed().as_secs_f64(),
    };
    writer.append(&last_row)?;
    let mut best_acc = eval0.token_acc;
    save_model(&model, &cfg.checkpoint_path)?;

    if cfg.steps == 0 {
        return Ok(TrainOutcome {
            final_row: last_row,
            model,
            stopped_early: false,
            steps_run: 0,
        });
    }

    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);
    let mut stopped_early = false;
    let mut steps_run = 0;
    for step in 1..=cfg.steps {
        let batch: Vec<&Example> = (0..cfg.batch_size)
            .map(|_| &dataset.train[batch_rng.gen_range(0..dataset.train.len())])
            .collect();
        let (loss, mut grads) = batch_gradients(
            &model,
            &batch,
            cfg.label_smoothing,
            cfg.model.dropout,
            cfg.seed,
            step,
        )?;
        if !loss.is_finite() {
            return Err(Error::TrainingAborted {
                step,
                reason: format!("non-finite loss {loss}"),
            });
        }
        clip_gradients(&mut grads, cfg.clip_norm);
        adam.step(model.store_mut(), &grads, lr_at(cfg, step), cfg);
        steps_run = step;

        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let m = evaluate(&model, &dataset.val)?;
            last_row = MetricsRow {
                step,
                loss,
                token_acc: m.token_acc,
                seq_acc: m.seq_acc,
                edit_rate: m.edit_rate,
                seconds: t0.elapsed().as_secs_f64(),
            };
            writer.append(&last_row)?;
            if m.token_acc > best_acc {
                best_acc = m.token_acc;
                save_model(&model, &cfg.checkpoint_path)?;
            }
            if let Some(target) = cfg.target_token_acc {
                if m.token_acc >= target {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        final_row: last_row,
        model,
        stopped_early,
        steps_run,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Order,
    Placement,
    Fusion,
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AblationKind::Order => "order",
            AblationKind::Placement => "placement",
            AblationKind::Fusion => "fusion",
        };
        f.write_str(s)
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "order" => Ok(AblationKind::Order),
            "placement" => Ok(AblationKind::Placement),
            "fusion" => Ok(AblationKind::Fusion),
            other => Err(Error::InvalidConfig {
                field: "kind",
                reason: format!("unknown ablation `{other}` (order|placement|fusion)"),
            }),
        }
    }
}

fn cell_paths(out_csv: &Path, label: &str) -> (PathBuf, PathBuf) {
    let stem = out_csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ablation".into());
    let metrics = out_csv.with_file_name(format!("{stem}.{label}.metrics.csv"));
    let ckpt = out_csv.with_file_name(format!("{stem}.{label}.gncf"));
    (metrics, ckpt)
}

fn run_cell(base: &TrainConfig, label: &str, out_csv: &Path, adjust: impl FnOnce(&mut TrainConfig)) -> Result<TrainOutcome> {
    let mut cfg = base.clone();
    let (metrics, ckpt) = cell_paths(out_csv, label);
    cfg.metrics_path = metrics;
    cfg.checkpoint_path = ckpt;
    adjust(&mut cfg);
    train(&cfg).map_err(Error::in_ablation_cell(label))
}

fn metrics_cells(row: &MetricsRow) -> String {
    format!(
        "{:.6},{:.6},{:.6},{:.6}",
        row.loss, row.token_acc, row.seq_acc, row.edit_rate
    )
}

/// Train one model per ablation cell with identical seeds and data, and
/// write a comparison CSV. Returns the CSV content.
///
/// - `order`: trains the desk-scale orders {3, 5} after validating the
///   published split schedules for orders {3, 5, 7, 9} at width 256.
/// - `placement`: {none, encoder, decoder, both}.
/// - `fusion`: {parallel, serial, internal}; placement falls back to the
///   encoder when the base disables it, so the fusion under test is live.
pub fn run_ablation(kind: AblationKind, base: &TrainConfig, out_csv: &Path) -> Result<String> {
    if let Some(dir) = out_csv.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let dataset_hash = generate_task(&base.task)?.content_hash();
    let mut csv = String::new();
    match kind {
        AblationKind::Order => {
            for order in [3usize, 5, 7, 9] {
                dimension_schedule(256, order)?;
            }
            csv.push_str("order,params,delta_params,schedule,loss,token_acc,seq_acc,edit_rate,dataset_hash\n");
            for order in [3usize, 5] {
                let label = format!("order{order}");
                let outcome = run_cell(base, &label, out_csv, |c| {
                    c.model.order = order;
                })?;
                let report =
                    count_parameters(&outcome.model).map_err(Error::in_ablation_cell(&label))?;
                let schedule = dimension_schedule(base.model.model_dim, order)?
                    .iter()
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
                    .join(" ");
                csv.push_str(&format!(
                    "{order},{},{},{schedule},{},{dataset_hash}\n",
                    report.total,
                    report.delta_vs_plain,
                    metrics_cells(&outcome.final_row)
                ));
            }
        }
        AblationKind::Placement => {
            csv.push_str("esa_en,esa_de,params,loss,token_acc,seq_acc,edit_rate,dataset_hash\n");
            for placement in [
                EsaPlacement::None,
                EsaPlacement::Encoder,
                EsaPlacement::Decoder,
                EsaPlacement::Both,
            ] {
                let label = format!("placement_{placement}");
                let outcome = run_cell(base, &label, out_csv, |c| {
                    c.model.set_placement(placement);
                })?;
                csv.push_str(&format!(
                    "{},{},{},{},{dataset_hash}\n",
                    c_flag(placement == EsaPlacement::Encoder || placement == EsaPlacement::Both),
                    c_flag(placement == EsaPlacement::Decoder || placement == EsaPlacement::Both),
                    outcome.model.store().total_params(),
                    metrics_cells(&outcome.final_row)
                ));
            }
        }
        AblationKind::Fusion => {
            csv.push_str("fusion,params,loss,token_acc,seq_acc,edit_rate,dataset_hash\n");
            for fusion in [FusionMode::Parallel, FusionMode::Serial, FusionMode::Internal] {
                let label = format!("fusion_{fusion}");
                let outcome = run_cell(base, &label, out_csv, |c| {
                    c.model.fusion = fusion;
                    if c.model.placement() == EsaPlacement::None {
                        c.model.set_placement(EsaPlacement::Encoder);
                    }
                })?;
                csv.push_str(&format!(
                    "{fusion},{},{},{dataset_hash}\n",
                    outcome.model.store().total_params(),
                    metrics_cells(&outcome.final_row)
                ));
            }
        }
    }
    std::fs::write(out_csv, &csv)?;
    Ok(csv)
}

fn c_flag(set: bool) -> &'static str {
    if set {
        "true"
    } else {
        "false"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::read_metrics;
    use crate::task::TaskKind;

    fn tiny_train_config(dir: &Path, seed: u64) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                encoder_layers: 1,
                decoder_layers: 1,
                model_dim: 8,
                heads: 2,
                ffn_dim: 16,
                order: 2,
                kernel: 3,
                source_vocab: 10,
                target_vocab: 10,
                max_len: 16,
                ..ModelConfig::default()
            },
            task: TaskSpec {
                kind: TaskKind::Copy,
                vocab: 10,
                min_len: 2,
                max_len: 4,
                samples: 40,
                seed,
            },
            steps: 3,
            batch_size: 4,
            peak_lr: 1e-3,
            warmup_steps: 2,
            eval_interval: 1,
            seed,
            metrics_path: dir.join("metrics.csv"),
            checkpoint_path: dir.join("model.gncf"),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_peaks_at_warmup() {
        let cfg = TrainConfig {
            peak_lr: 2.0,
            warmup_steps: 100,
            ..TrainConfig::default()
        };
        assert!((lr_at(&cfg, 100) - 2.0).abs() < 1e-12);
        assert!(lr_at(&cfg, 50) < 2.0);
        assert!(lr_at(&cfg, 400) < lr_at(&cfg, 100));
        assert!((lr_at(&cfg, 400) - 2.0 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn adam_with_zero_gradients_is_identity() {
        let model = build_model(&ModelConfig::default(), 0).unwrap();
        let mut store = model.store().clone();
        let before: Vec<_> = store.entries().iter().map(|e| e.value.clone()).collect();
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.numel()]).collect();
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &zeros, 1e-3, &TrainConfig::default());
        for (b, e) in before.iter().zip(store.entries()) {
            assert_eq!(**b, **e.value);
        }
    }

    #[test]
    fn clipping_rescales_to_requested_norm() {
        let mut grads = vec![vec![3.0, 4.0]];
        let norm = clip_gradients(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let after: f64 = grads[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);

        let mut small = vec![vec![0.3]];
        clip_gradients(&mut small, 1.0);
        assert_eq!(small[0][0], 0.3);
    }

    #[test]
    fn fresh_model_loss_is_near_log_vocab() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_train_config(dir.path(), 0);
        let dataset = generate_task(&cfg.task).unwrap();
        let model = build_model(&cfg.model, 0).unwrap();
        let batch: Vec<&Example> = dataset.train.iter().take(8).collect();
        let loss = batch_loss(&model, &batch, cfg.label_smoothing).unwrap();
        let expected = (cfg.task.vocab as f64).ln();
        assert!(
            (loss - expected).abs() <= 0.2 * expected,
            "loss {loss} vs ln(vocab) {expected}"
        );
    }

    #[test]
    fn parallel_and_sequential_batches_agree_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_train_config(dir.path(), 1);
        let dataset = generate_task(&cfg.task).unwrap();
        let model = build_model(&cfg.model, 1).unwrap();
        let batch: Vec<&Example> = dataset.train.iter().take(6).collect();
        let (l1, g1) = batch_gradients(&model, &batch, 0.1, 0.0, 1, 1).unwrap();
        let (l2, g2) = batch_gradients_seq(&model, &batch, 0.1, 0.0, 1, 1).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn zero_steps_writes_initial_metrics_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_train_config(dir.path(), 2);
        cfg.steps = 0;
        cfg.warmup_steps = 0;
        let outcome = train(&cfg).unwrap();
        assert_eq!(outcome.steps_run, 0);
        let rows = read_metrics(&cfg.metrics_path).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].step, 0);
        assert!(cfg.checkpoint_path.exists());
    }

    #[test]
    fn same_seed_runs_are_identical_apart_from_timing() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg_a = tiny_train_config(dir_a.path(), 3);
        let cfg_b = tiny_train_config(dir_b.path(), 3);
        train(&cfg_a).unwrap();
        train(&cfg_b).unwrap();
        let rows_a = read_metrics(&cfg_a.metrics_path).unwrap();
        let rows_b = read_metrics(&cfg_b.metrics_path).unwrap();
        assert_eq!(rows_a.len(), rows_b.len());
        for (a, b) in rows_a.iter().zip(&rows_b) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.loss, b.loss);
            assert_eq!(a.token_acc, b.token_acc);
            assert_eq!(a.seq_acc, b.seq_acc);
            assert_eq!(a.edit_rate, b.edit_rate);
        }
        assert!(rows_a.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn training_loss_decreases_over_a_short_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_train_config(dir.path(), 4);
        cfg.steps = 40;
        cfg.warmup_steps = 10;
        cfg.eval_interval = 40;
        let outcome = train(&cfg).unwrap();
        let rows = read_metrics(&cfg.metrics_path).unwrap();
        assert!(rows.len() >= 2);
        assert!(
            outcome.final_row.loss < rows[0].loss,
            "loss {} did not improve on {}",
            outcome.final_row.loss,
            rows[0].loss
        );
    }
}
