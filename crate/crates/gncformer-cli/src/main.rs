//! Command-line interface: training, evaluation, decoding, parameter
//! analysis, gradient verification and ablation drivers.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags), 2 on runtime
//! failures (missing files, invalid configurations, failed checks).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

use gncformer::analysis::{count_parameters, overhead_table};
use gncformer::checkpoint::load_model;
use gncformer::esa::FusionMode;
use gncformer::gnconv::{dimension_schedule, gnconv_param_count};
use gncformer::gradcheck;
use gncformer::model::{build_model, EsaPlacement, ModelConfig};
use gncformer::task::{generate_task, TaskKind, TaskSpec, BOS, EOS};
use gncformer::train::{evaluate, run_ablation, train, AblationKind, TrainConfig};

const CONFIG_KEYS_HELP: &str = "\
Config file: one `key = value` per line, `#` starts a comment, unknown keys
are rejected. Keys and defaults:
  steps = 3000            batch_size = 32         peak_lr = 0.001
  warmup_steps = 200      beta1 = 0.9             beta2 = 0.98
  adam_eps = 1e-9         clip_norm = 5           label_smoothing = 0.1
  seed = 0                eval_interval = 100     target_token_acc = none
  metrics_path = metrics.csv                      checkpoint_path = model.gncf
  enc_layers = 2          dec_layers = 2          dim = 32
  heads = 4               ffn_dim = 128           order = 2
  kernel = 7              alpha = 1               fusion = internal
  esa = encoder           dropout = 0             model_max_len = 64
  task = copy             task_vocab = 20         task_min_len = 5
  task_max_len = 12       task_samples = 2000     task_seed = 0";

#[derive(Parser)]
#[command(
    name = "gncformer",
    version,
    about = "Sequence model with gated-convolution enhanced attention: train, evaluate, analyze",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a synthetic task described by a config file.
    #[command(after_help = CONFIG_KEYS_HELP)]
    Train(TrainArgs),
    /// Evaluate a checkpoint on a freshly generated validation set.
    Eval(EvalArgs),
    /// Greedy-decode one source sequence with a checkpoint.
    Decode(DecodeArgs),
    /// Report per-layer and total parameter overhead of the enhanced block.
    AnalyzeParams(AnalyzeParamsArgs),
    /// Verify gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Train every cell of an ablation grid and emit a comparison CSV.
    #[command(after_help = CONFIG_KEYS_HELP)]
    Ablate(AblateArgs),
    /// Print the split-width schedule for a dimension and order.
    Schedule(ScheduleArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the key = value training configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the recursion order.
    #[arg(long)]
    order: Option<usize>,
    /// Override the fusion mode (internal|serial|parallel|none).
    #[arg(long)]
    fusion: Option<String>,
    /// Override the placement (encoder|decoder|both|none).
    #[arg(long)]
    esa: Option<String>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Seed for the generated evaluation task.
    #[arg(long)]
    task_seed: u64,
    /// Task kind (copy|reverse|sort).
    #[arg(long, default_value = "copy")]
    task: String,
    /// Minimum source length.
    #[arg(long, default_value_t = 5)]
    task_min_len: usize,
    /// Maximum source length.
    #[arg(long, default_value_t = 12)]
    task_max_len: usize,
    /// Number of generated examples (the validation tenth is scored).
    #[arg(long, default_value_t = 2000)]
    task_samples: usize,
}

#[derive(Args)]
struct DecodeArgs {
    /// Checkpoint to decode with.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Space-separated source token ids, e.g. "5 9 3".
    #[arg(long)]
    source: String,
}

#[derive(Args)]
struct AnalyzeParamsArgs {
    /// Model width.
    #[arg(long, default_value_t = 256)]
    dim: usize,
    /// Recursion order.
    #[arg(long, default_value_t = 5)]
    order: usize,
    /// Depthwise kernel width.
    #[arg(long, default_value_t = 32)]
    kernel: usize,
    /// Number of enhanced layers.
    #[arg(long, default_value_t = 6)]
    layers: usize,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Suite to run (tensor|gnconv|esa|model); all suites by default.
    #[arg(long, default_value = "all")]
    module: String,
    /// Seed for the random instances.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// Grid to sweep (order|placement|fusion).
    #[arg(long)]
    kind: String,
    /// Base training configuration shared by every cell.
    #[arg(long)]
    config: PathBuf,
    /// Output CSV path; defaults to <kind>_ablation.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Model width.
    #[arg(long)]
    dim: usize,
    /// Recursion order.
    #[arg(long)]
    order: usize,
}

/// Parse a `key = value` training config with full defaults.
fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    parse_config(&text)
}

fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut placement = EsaPlacement::Encoder;
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {lineno}: expected `key = value`, got `{line}`"))?;
        let (key, value) = (key.trim(), value.trim());
        if value.is_empty() {
            bail!("config line {lineno}: empty value for `{key}`");
        }
        if let Some(first) = seen.insert(key.to_string(), lineno) {
            bail!("config line {lineno}: `{key}` already set on line {first}");
        }
        let ctx = |what: &str| format!("config line {lineno}: bad {what} for `{key}`");
        match key {
            "steps" => cfg.steps = value.parse().with_context(|| ctx("integer"))?,
            "batch_size" => cfg.batch_size = value.parse().with_context(|| ctx("integer"))?,
            "peak_lr" => cfg.peak_lr = value.parse().with_context(|| ctx("number"))?,
            "warmup_steps" => cfg.warmup_steps = value.parse().with_context(|| ctx("integer"))?,
            "beta1" => cfg.beta1 = value.parse().with_context(|| ctx("number"))?,
            "beta2" => cfg.beta2 = value.parse().with_context(|| ctx("number"))?,
            "adam_eps" => cfg.adam_eps = value.parse().with_context(|| ctx("number"))?,
            "clip_norm" => cfg.clip_norm = value.parse().with_context(|| ctx("number"))?,
            "label_smoothing" => {
                cfg.label_smoothing = value.parse().with_context(|| ctx("number"))?
            }
            "seed" => cfg.seed = value.parse().with_context(|| ctx("integer"))?,
            "eval_interval" => cfg.eval_interval = value.parse().with_context(|| ctx("integer"))?,
            "metrics_path" => cfg.metrics_path = PathBuf::from(value),
            "checkpoint_path" => cfg.checkpoint_path = PathBuf::from(value),
            "target_token_acc" => {
                cfg.target_token_acc = if value == "none" {
                    None
                } else {
                    Some(value.parse().with_context(|| ctx("number"))?)
                }
            }
            "enc_layers" => cfg.model.encoder_layers = value.parse().with_context(|| ctx("integer"))?,
            "dec_layers" => cfg.model.decoder_layers = value.parse().with_context(|| ctx("integer"))?,
            "dim" => cfg.model.model_dim = value.parse().with_context(|| ctx("integer"))?,
            "heads" => cfg.model.heads = value.parse().with_context(|| ctx("integer"))?,
            "ffn_dim" => cfg.model.ffn_dim = value.parse().with_context(|| ctx("integer"))?,
            "order" => cfg.model.order = value.parse().with_context(|| ctx("integer"))?,
            "kernel" => cfg.model.kernel = value.parse().with_context(|| ctx("integer"))?,
            "alpha" => cfg.model.alpha = value.parse().with_context(|| ctx("number"))?,
            "fusion" => cfg.model.fusion = FusionMode::from_str(value)?,
            "esa" => placement = EsaPlacement::from_str(value)?,
            "dropout" => cfg.model.dropout = value.parse().with_context(|| ctx("number"))?,
            "model_max_len" => cfg.model.max_len = value.parse().with_context(|| ctx("integer"))?,
            "task" => cfg.task.kind = TaskKind::from_str(value)?,
            "task_vocab" => cfg.task.vocab = value.parse().with_context(|| ctx("integer"))?,
            "task_min_len" => cfg.task.min_len = value.parse().with_context(|| ctx("integer"))?,
            "task_max_len" => cfg.task.max_len = value.parse().with_context(|| ctx("integer"))?,
            "task_samples" => cfg.task.samples = value.parse().with_context(|| ctx("integer"))?,
            "task_seed" => cfg.task.seed = value.parse().with_context(|| ctx("integer"))?,
            other => bail!("config line {lineno}: unknown key `{other}`"),
        }
    }
    cfg.model.set_placement(placement);
    cfg.model.source_vocab = cfg.task.vocab;
    cfg.model.target_vocab = cfg.task.vocab;
    Ok(cfg)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(order) = args.order {
        cfg.model.order = order;
    }
    if let Some(fusion) = &args.fusion {
        cfg.model.fusion = FusionMode::from_str(fusion)?;
    }
    if let Some(esa) = &args.esa {
        cfg.model.set_placement(EsaPlacement::from_str(esa)?);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let outcome = train(&cfg)?;
    let r = &outcome.final_row;
    println!(
        "step={} loss={:.6} token_acc={:.4} seq_acc={:.4} edit_rate={:.4} elapsed={:.1}s{}",
        r.step,
        r.loss,
        r.token_acc,
        r.seq_acc,
        r.edit_rate,
        r.seconds,
        if outcome.stopped_early {
            " (stopped at target accuracy)"
        } else {
            ""
        }
    );
    println!("metrics: {}", cfg.metrics_path.display());
    println!("checkpoint: {}", cfg.checkpoint_path.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", args.checkpoint.display()))?;
    let spec = TaskSpec {
        kind: TaskKind::from_str(&args.task)?,
        vocab: model.config().source_vocab,
        min_len: args.task_min_len,
        max_len: args.task_max_len,
        samples: args.task_samples,
        seed: args.task_seed,
    };
    let dataset = generate_task(&spec)?;
    let m = evaluate(&model, &dataset.val)?;
    println!(
        "examples={} token_acc={:.4} seq_acc={:.4} edit_rate={:.4}",
        dataset.val.len(),
        m.token_acc,
        m.seq_acc,
        m.edit_rate
    );
    Ok(())
}

fn cmd_decode(args: &DecodeArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", args.checkpoint.display()))?;
    let source: Vec<usize> = args
        .source
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|e| anyhow!("bad source token `{t}`: {e}"))
        })
        .collect::<Result<_>>()?;
    if source.is_empty() {
        bail!("--source must hold at least one token id");
    }
    let max_steps = model.config().max_len - 1;
    let decoded = model.greedy_decode(&source, max_steps, BOS, EOS)?;
    println!(
        "{}",
        decoded
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(())
}

fn cmd_analyze_params(args: &AnalyzeParamsArgs) -> Result<()> {
    let closed = gnconv_param_count(args.dim, args.order, args.kernel, true)?;
    // Cross-check the closed form against enumerating a built block.
    let enumerated = {
        use gncformer::params::{ParamBuilder, ParamStore};
        use rand::SeedableRng;
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        gncformer::gnconv::GnConvParams::build(
            &mut pb, args.dim, args.order, args.kernel, 1.0, false,
        )?;
        store.total_params()
    };
    if closed != enumerated {
        bail!("closed-form count {closed} does not match enumeration {enumerated}");
    }
    let schedule = dimension_schedule(args.dim, args.order)?;
    println!(
        "schedule: {}",
        schedule
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    );
    println!("per_layer_overhead: {closed}");
    println!("layers: {}", args.layers);
    println!("total_delta: {}", closed * args.layers);

    // Full-model cross-check when the geometry admits one.
    if args.dim % 4 == 0 {
        let cfg = ModelConfig {
            encoder_layers: args.layers.max(1),
            decoder_layers: 1,
            model_dim: args.dim,
            heads: 4,
            ffn_dim: 4 * args.dim,
            order: args.order,
            kernel: args.kernel,
            esa_in_encoder: true,
            esa_in_decoder: false,
            source_vocab: 64,
            target_vocab: 64,
            max_len: 16,
            ..ModelConfig::default()
        };
        let model = build_model(&cfg, 0)?;
        let report = count_parameters(&model)?;
        println!("model_total: {}", report.total);
        println!("model_delta_vs_plain: {}", report.delta_vs_plain);
        let table = overhead_table(&cfg, &[args.order])?;
        print!("{}", table.to_text());
    }
    Ok(())
}

fn cmd_grad_check(args: &GradCheckArgs) -> Result<()> {
    let reports = gradcheck::run_module(&args.module, args.seed)?;
    let mut all_ok = true;
    for r in &reports {
        all_ok &= r.ok();
        println!(
            "{:<28} max_rel_err={:.3e} threshold={:.0e} {}",
            r.name,
            r.max_rel_err,
            r.threshold,
            if r.ok() { "ok" } else { "FAIL" }
        );
    }
    if !all_ok {
        bail!("gradient check failed");
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let kind = AblationKind::from_str(&args.kind)?;
    let base = load_config(&args.config)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{kind}_ablation.csv")));
    let csv = run_ablation(kind, &base, &out)?;
    print!("{csv}");
    println!("written: {}", out.display());
    Ok(())
}

fn cmd_schedule(args: &ScheduleArgs) -> Result<()> {
    let widths = dimension_schedule(args.dim, args.order)?;
    println!(
        "{}",
        widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Decode(a) => cmd_decode(a),
        Cmd::AnalyzeParams(a) => cmd_analyze_params(a),
        Cmd::GradCheck(a) => cmd_grad_check(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Schedule(a) => cmd_schedule(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    /// Every flag a subcommand accepts must appear in its rendered help.
    #[test]
    fn help_lists_every_accepted_flag() {
        let mut cmd = Cli::command();
        let names: Vec<String> = cmd
            .get_subcommands()
            .map(|s| s.get_name().to_string())
            .collect();
        assert_eq!(
            names,
            vec![
                "train",
                "eval",
                "decode",
                "analyze-params",
                "grad-check",
                "ablate",
                "schedule"
            ]
        );
        for name in names {
            let sub = cmd.find_subcommand_mut(&name).unwrap();
            let declared: BTreeSet<String> = sub
                .get_arguments()
                .filter_map(|a| a.get_long().map(|l| l.to_string()))
                .collect();
            let help = sub.render_long_help().to_string();
            let mut advertised = BTreeSet::new();
            for token in help.split_whitespace() {
                if let Some(flag) = token.strip_prefix("--") {
                    let flag: String = flag
                        .chars()
                        .take_while(|c| c.is_ascii_alphanumeric() || *c == '-')
                        .collect();
                    if !flag.is_empty() {
                        advertised.insert(flag);
                    }
                }
            }
            for flag in &declared {
                assert!(
                    advertised.contains(flag),
                    "{name}: flag --{flag} missing from help"
                );
            }
            for flag in &advertised {
                if flag == "help" || flag == "version" {
                    continue;
                }
                assert!(
                    declared.contains(flag),
                    "{name}: help advertises unknown flag --{flag}"
                );
            }
        }
    }

    #[test]
    fn empty_config_is_full_defaults() {
        let cfg = parse_config("").unwrap();
        let mut expected = TrainConfig::default();
        expected.model.set_placement(EsaPlacement::Encoder);
        expected.model.source_vocab = expected.task.vocab;
        expected.model.target_vocab = expected.task.vocab;
        assert_eq!(cfg, expected);
    }

    #[test]
    fn config_rejects_unknown_keys_with_line_number() {
        let err = parse_config("steps = 5\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
    }

    #[test]
    fn config_rejects_malformed_lines_and_duplicates() {
        let err = parse_config("steps 5\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        let err = parse_config("steps = 5\nsteps = 6\n").unwrap_err().to_string();
        assert!(err.contains("already set"), "{err}");
    }

    #[test]
    fn config_accepts_comments_and_overrides() {
        let cfg = parse_config("# a comment\norder = 5\ndim = 256  # trailing\nheads = 4\n").unwrap();
        assert_eq!(cfg.model.order, 5);
        assert_eq!(cfg.model.model_dim, 256);
        assert!(cfg.model.validate().is_ok());
    }

    #[test]
    fn indivisible_order_dim_pair_fails_validation_naming_both() {
        let cfg = parse_config("order = 5\ndim = 24\nheads = 2\n").unwrap();
        let err = cfg.model.validate().unwrap_err().to_string();
        assert!(err.contains("16") && err.contains("24"), "{err}");
    }
}
