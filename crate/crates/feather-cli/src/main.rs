//! Command-line driver: corpus generation, toy training, decoding,
//! offline pruning, robustness scoring and decoder benchmarks behind
//! one binary.
//!
//! Every subcommand taking `--seed` is reproducible: identical
//! invocations write byte-identical files. Values written to files
//! use full round-trip precision; console output is pretty-printed
//! and non-contractual.

use clap::{ArgAction, Args, Parser, Subcommand};
use feather_core::attention::{alignment_to_csv, alignment_to_pgm, AttentionConfig, Mechanism};
use feather_core::bundle::{load_model, peek_precision, save_model, LoadedModel, Storage};
use feather_core::data::{generate, stress_suite, StressKind, ToyDataset, ToyTaskSpec};
use feather_core::model::{
    infer, metrics_to_csv, train_toy, InferOptions, InferOutput, ModelConfig, ModelMasks,
    ModelParams, PruneOptions, TrainOptions,
};
use feather_core::robustness::{
    evaluate, per_utterance_csv, summarize, summary_csv, RobustnessOptions,
};
use feather_core::scalar::Precision;
use feather_core::sparsity::{count_ops, prune_to, BlockMask, Curve, PruneSchedule};
use feather_core::timing::{bench_decoder, BenchOptions};
use feather_core::{FeatherError, Result, Scalar, Tensor};
use serde::Serialize;
use std::path::{Path, PathBuf};

const EXIT_HELP: &str = "exit codes:
  0  success
  2  usage error
  3  invalid configuration or contract violation
  4  file or format error
  5  numeric failure (divergence, non-finite values)";

#[derive(Parser)]
#[command(
    name = "feather",
    about = "Toy seq2seq stack with monotonic attention and block-sparse decoding",
    after_help = EXIT_HELP,
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic utterance corpus.
    GenData(GenDataArgs),
    /// Train a model on a generated corpus, optionally pruning as it goes.
    TrainToy(TrainToyArgs),
    /// Decode symbol ids with a trained bundle.
    Infer(InferArgs),
    /// Prune a bundle's recurrent kernels to a target sparsity.
    Prune(PruneArgs),
    /// Score alignment quality on degenerate stress inputs.
    EvalRobust(EvalRobustArgs),
    /// Time the decoder loop of a dense bundle against a sparse one.
    Bench(BenchArgs),
    /// Print the multiply count of one sparse LSTM step.
    CountOps(CountOpsArgs),
}

#[derive(Args)]
struct SpecArgs {
    #[arg(long, default_value_t = 32)]
    vocab_size: usize,
    #[arg(long, default_value_t = 5)]
    min_symbols: usize,
    #[arg(long, default_value_t = 20)]
    max_symbols: usize,
    /// Mean frames per symbol.
    #[arg(long, default_value_t = 4)]
    frames_per_symbol: usize,
    /// Half-width of the per-symbol frame count spread.
    #[arg(long, default_value_t = 0)]
    frame_jitter: usize,
    #[arg(long, default_value_t = 16)]
    mel_bins: usize,
    #[arg(long, default_value_t = 0.02)]
    noise_std: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Utterances to generate.
    #[arg(long, default_value_t = 64)]
    count: usize,
}

impl SpecArgs {
    fn to_spec(&self) -> ToyTaskSpec {
        ToyTaskSpec {
            vocab_size: self.vocab_size,
            min_symbols: self.min_symbols,
            max_symbols: self.max_symbols,
            frames_per_symbol: self.frames_per_symbol,
            frame_jitter: self.frame_jitter,
            mel_bins: self.mel_bins,
            noise_std: self.noise_std,
            seed: self.seed,
            count: self.count,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Corpus file to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    spec: SpecArgs,
}

#[derive(Args)]
struct TrainToyArgs {
    /// Corpus file from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Model bundle to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-step metrics CSV to write.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Directory for the final alignment of the first utterance
    /// (alignment.csv and alignment.pgm).
    #[arg(long)]
    report_dir: Option<PathBuf>,

    #[arg(long, default_value = "gaussian")]
    mechanism: Mechanism,
    /// Mixture components (gmmv2b only).
    #[arg(long, default_value_t = 5)]
    components: usize,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 32)]
    encoder_dim: usize,
    #[arg(long, default_value_t = 64)]
    attn_rnn_dim: usize,
    #[arg(long, default_value_t = 64)]
    decoder_rnn_dim: usize,
    /// Post-net recurrent width.
    #[arg(long, default_value_t = 256)]
    postnet_dim: usize,
    /// Frames predicted per decode step.
    #[arg(long, default_value_t = 2)]
    reduction: usize,
    /// Post-net output delay in frames.
    #[arg(long, default_value_t = 5)]
    delay: usize,
    /// Weight of the stop objective.
    #[arg(long, default_value_t = 0.001)]
    lambda: f64,

    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "f32")]
    precision: Precision,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Heavy-ball momentum; 0 is plain gradient descent.
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value_t = 1.0)]
    clip_norm: f64,
    #[arg(long, default_value_t = 50)]
    log_every: usize,

    /// Grow a sparsity mask during training.
    #[arg(long, action = ArgAction::SetTrue)]
    prune: bool,
    #[arg(long, default_value_t = 0.9)]
    target_sparsity: f64,
    #[arg(long, default_value_t = 2000)]
    prune_start: usize,
    #[arg(long, default_value_t = 50)]
    prune_interval: usize,
    #[arg(long, default_value_t = 20000)]
    prune_end: usize,
    #[arg(long, default_value = "cubic")]
    prune_curve: Curve,
    #[arg(long, default_value_t = 16)]
    block_rows: usize,
    #[arg(long, default_value_t = 1)]
    block_cols: usize,
    /// Prune the attention LSTM kernel.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    prune_attn: bool,
    /// Prune the decoder LSTM kernel.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    prune_dec: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Model bundle.
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated symbol ids, e.g. "3,1,4".
    #[arg(long)]
    ids: String,
    /// Directory for mel_pre.csv, mel_post.csv, alignment.csv,
    /// alignment.pgm and meta.json.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 400)]
    max_steps: usize,
}

#[derive(Args)]
struct PruneArgs {
    /// Bundle to prune.
    #[arg(long)]
    model: PathBuf,
    /// Sparse bundle to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    target_sparsity: f64,
    #[arg(long, default_value_t = 16)]
    block_rows: usize,
    #[arg(long, default_value_t = 1)]
    block_cols: usize,
    /// Prune the attention LSTM kernel.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    prune_attn: bool,
    /// Prune the decoder LSTM kernel.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    prune_dec: bool,
}

#[derive(Args)]
struct EvalRobustArgs {
    /// Model bundle.
    #[arg(long)]
    model: PathBuf,
    /// Directory for summary.csv and per-suite CSVs.
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated suite names, or "all".
    #[arg(long, default_value = "all")]
    suites: String,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    min_symbols: usize,
    #[arg(long, default_value_t = 20)]
    max_symbols: usize,
    /// Position coverage threshold on attention weight.
    #[arg(long, default_value_t = 0.3)]
    alpha_threshold: f64,
    /// Positions advancing less than this per step count as stalled.
    #[arg(long, default_value_t = 0.01)]
    stall_delta: f64,
    /// Stalls only count past this many consecutive steps (3x the
    /// default frames per symbol).
    #[arg(long, default_value_t = 12)]
    stall_run: usize,
    #[arg(long, default_value_t = 400)]
    max_steps: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Dense bundle.
    #[arg(long)]
    dense: PathBuf,
    /// Sparse bundle with the same architecture.
    #[arg(long)]
    sparse: PathBuf,
    /// Frames decoded per timed run.
    #[arg(long, default_value_t = 512)]
    frames: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Input length fed to both sides.
    #[arg(long, default_value_t = 20)]
    symbols: usize,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CountOpsArgs {
    #[arg(long)]
    input: usize,
    #[arg(long)]
    hidden: usize,
    #[arg(long)]
    sparsity: f64,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error[{}]: {e}", e.class());
        std::process::exit(match e.class() {
            "config" | "contract" => 3,
            "io" | "format" => 4,
            "numeric" => 5,
            _ => 1,
        });
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::TrainToy(a) => match a.precision {
            Precision::F32 => train::<f32>(a),
            Precision::F64 => train::<f64>(a),
        },
        Cmd::Infer(a) => match peek_precision(&std::fs::read(&a.model)?)? {
            Precision::F32 => run_infer::<f32>(a),
            Precision::F64 => run_infer::<f64>(a),
        },
        Cmd::Prune(a) => match peek_precision(&std::fs::read(&a.model)?)? {
            Precision::F32 => prune::<f32>(a),
            Precision::F64 => prune::<f64>(a),
        },
        Cmd::EvalRobust(a) => match peek_precision(&std::fs::read(&a.model)?)? {
            Precision::F32 => eval_robust::<f32>(a),
            Precision::F64 => eval_robust::<f64>(a),
        },
        Cmd::Bench(a) => match peek_precision(&std::fs::read(&a.dense)?)? {
            Precision::F32 => bench::<f32>(a),
            Precision::F64 => bench::<f64>(a),
        },
        Cmd::CountOps(a) => {
            if !(0.0..=1.0).contains(&a.sparsity) {
                return Err(FeatherError::Config(format!(
                    "sparsity {} must lie in [0, 1]",
                    a.sparsity
                )));
            }
            if a.input == 0 || a.hidden == 0 {
                return Err(FeatherError::Config("dims must be positive".into()));
            }
            println!("{:.1}", count_ops(a.input, a.hidden, a.sparsity));
            Ok(())
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = a.spec.to_spec();
    let ds = generate(&spec)?;
    ds.save(&a.out)?;
    let frames: usize = ds.utterances.iter().map(|u| u.frames.rows()).sum();
    println!(
        "wrote {} utterances ({frames} frames) to {}",
        ds.utterances.len(),
        a.out.display()
    );
    Ok(())
}

fn model_config_from(a: &TrainToyArgs, spec: &ToyTaskSpec) -> Result<ModelConfig> {
    let attention = match a.mechanism {
        Mechanism::Gaussian => AttentionConfig::gaussian(),
        Mechanism::Gmmv2b => AttentionConfig::gmmv2b(a.components),
    };
    let config = ModelConfig {
        vocab_size: spec.vocab_size,
        embed_dim: a.embed_dim,
        encoder_dim: a.encoder_dim,
        attn_rnn_dim: a.attn_rnn_dim,
        decoder_rnn_dim: a.decoder_rnn_dim,
        mel_bins: spec.mel_bins,
        reduction: a.reduction,
        postnet_dim: a.postnet_dim,
        postnet_delay: a.delay,
        stop_lambda: a.lambda,
        attention,
    };
    config.validate()?;
    Ok(config)
}

fn train<F: Scalar>(a: TrainToyArgs) -> Result<()> {
    let ds = ToyDataset::load(&a.data)?;
    let config = model_config_from(&a, &ds.spec)?;
    let examples = ds.examples::<F>();

    let prune = if a.prune {
        Some(PruneOptions {
            schedule: PruneSchedule {
                target_sparsity: a.target_sparsity,
                start_step: a.prune_start,
                interval: a.prune_interval,
                end_step: a.prune_end,
                curve: a.prune_curve,
            },
            block_rows: a.block_rows,
            block_cols: a.block_cols,
            prune_attn: a.prune_attn,
            prune_dec: a.prune_dec,
        })
    } else {
        None
    };
    let opts = TrainOptions {
        steps: a.steps,
        lr: a.lr,
        momentum: a.momentum,
        clip_norm: a.clip_norm,
        log_every: a.log_every,
        prune,
    };

    let mut params = ModelParams::<F>::init(&config, a.seed)?;
    let mut masks = ModelMasks::default();
    let report = train_toy(&mut params, &mut masks, &config, &examples, &opts)?;

    if let Some(path) = &a.metrics {
        std::fs::write(path, metrics_to_csv(&report.rows))?;
    }
    if let Some(dir) = &a.report_dir {
        std::fs::create_dir_all(dir)?;
        let out = infer(
            &params,
            &masks,
            &config,
            &examples[0].ids,
            &InferOptions::default(),
        )?;
        write_alignment(dir, &out)?;
    }
    let storage = if masks.is_dense() {
        Storage::Dense
    } else {
        Storage::Sparse
    };
    save_model(&a.out, &params, &masks, &config, storage)?;
    println!(
        "trained {} steps: loss {:.6} -> {:.6}, wrote {}",
        a.steps,
        report.initial_loss,
        report.final_loss,
        a.out.display()
    );
    Ok(())
}

fn parse_ids(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| FeatherError::Input(format!("bad symbol id `{tok}`")))
        })
        .collect()
}

/// Full round-trip precision, one row per frame.
fn tensor_csv<F: Scalar>(t: &Tensor<F>) -> String {
    let mut out = String::new();
    for r in 0..t.rows() {
        for (c, v) in t.row(r).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", v.to_f64c()));
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct InferMeta {
    steps: usize,
    frames: usize,
    truncated: bool,
    final_position: f64,
    multiplies: u64,
}

fn write_alignment<F: Scalar>(dir: &Path, out: &InferOutput<F>) -> Result<()> {
    std::fs::write(dir.join("alignment.csv"), alignment_to_csv(&out.trace.alignments))?;
    std::fs::write(dir.join("alignment.pgm"), alignment_to_pgm(&out.trace.alignments))?;
    Ok(())
}

fn run_infer<F: Scalar>(a: InferArgs) -> Result<()> {
    let loaded: LoadedModel<F> = load_model(&a.model)?;
    let ids = parse_ids(&a.ids)?;
    let opts = InferOptions {
        max_steps: a.max_steps,
    };
    let out = infer(&loaded.params, &loaded.masks, &loaded.config, &ids, &opts)?;

    std::fs::create_dir_all(&a.out_dir)?;
    std::fs::write(a.out_dir.join("mel_pre.csv"), tensor_csv(&out.mel_pre))?;
    std::fs::write(a.out_dir.join("mel_post.csv"), tensor_csv(&out.mel_post))?;
    write_alignment(&a.out_dir, &out)?;
    let meta = InferMeta {
        steps: out.steps,
        frames: out.mel_pre.rows(),
        truncated: out.trace.truncated,
        final_position: *out.trace.positions.last().unwrap_or(&0.0),
        multiplies: out.multiplies,
    };
    let mut meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| FeatherError::Format(format!("meta encode failed: {e}")))?;
    meta_json.push('\n');
    std::fs::write(a.out_dir.join("meta.json"), meta_json)?;
    println!(
        "decoded {} frames in {} steps ({})",
        out.mel_pre.rows(),
        out.steps,
        if out.trace.truncated { "truncated" } else { "stopped" }
    );
    Ok(())
}

fn prune<F: Scalar>(a: PruneArgs) -> Result<()> {
    if !a.prune_attn && !a.prune_dec {
        return Err(FeatherError::Config(
            "nothing to prune: both kernels are opted out".into(),
        ));
    }
    let mut loaded: LoadedModel<F> = load_model(&a.model)?;
    let grow = |weights: &Tensor<F>, existing: &Option<BlockMask>| -> Result<BlockMask> {
        let base = match existing {
            Some(m) => m.clone(),
            None => BlockMask::full(weights.rows(), weights.cols(), a.block_rows, a.block_cols)?,
        };
        prune_to(weights, &base, a.target_sparsity)
    };
    if a.prune_attn {
        loaded.masks.attn_lstm = Some(grow(&loaded.params.attn_lstm_w, &loaded.masks.attn_lstm)?);
    }
    if a.prune_dec {
        loaded.masks.dec_lstm = Some(grow(&loaded.params.dec_lstm_w, &loaded.masks.dec_lstm)?);
    }
    loaded.masks.apply(&mut loaded.params)?;
    save_model(&a.out, &loaded.params, &loaded.masks, &loaded.config, Storage::Sparse)?;
    let sa = loaded.masks.attn_lstm.as_ref().map_or(0.0, |m| m.sparsity());
    let sd = loaded.masks.dec_lstm.as_ref().map_or(0.0, |m| m.sparsity());
    println!(
        "pruned kernels to sparsity {sa:.4}/{sd:.4} with {}x{} blocks, wrote {}",
        a.block_rows,
        a.block_cols,
        a.out.display()
    );
    Ok(())
}

fn eval_robust<F: Scalar>(a: EvalRobustArgs) -> Result<()> {
    let loaded: LoadedModel<F> = load_model(&a.model)?;
    let kinds: Vec<StressKind> = if a.suites == "all" {
        StressKind::ALL.to_vec()
    } else {
        a.suites
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_>>()?
    };
    let spec = ToyTaskSpec {
        vocab_size: loaded.config.vocab_size,
        mel_bins: loaded.config.mel_bins,
        min_symbols: a.min_symbols,
        max_symbols: a.max_symbols,
        seed: a.seed,
        count: a.count,
        ..ToyTaskSpec::default()
    };
    let opts = RobustnessOptions {
        alpha_threshold: a.alpha_threshold,
        stall_delta: a.stall_delta,
        stall_run: a.stall_run,
        max_steps: a.max_steps,
    };

    std::fs::create_dir_all(&a.out_dir)?;
    let mut suites = Vec::new();
    for kind in kinds {
        let inputs = stress_suite(kind, &spec)?;
        let reports = evaluate(&loaded.params, &loaded.masks, &loaded.config, &inputs, &opts)?;
        std::fs::write(
            a.out_dir.join(format!("{}.csv", kind.name())),
            per_utterance_csv(&reports),
        )?;
        let suite = summarize(kind.name(), &reports);
        println!(
            "{}: {} inputs, truncation {:.3}, coverage error {:.3}, stalls {:.3}, aggregate {:.3}",
            suite.label,
            suite.utterances,
            suite.truncation_rate,
            suite.mean_coverage_error,
            suite.mean_stall_fraction,
            suite.aggregate()
        );
        suites.push(suite);
    }
    std::fs::write(a.out_dir.join("summary.csv"), summary_csv(&suites))?;
    Ok(())
}

fn bench<F: Scalar>(a: BenchArgs) -> Result<()> {
    if a.symbols == 0 {
        return Err(FeatherError::Config("symbols must be positive".into()));
    }
    let dense: LoadedModel<F> = load_model(&a.dense)?;
    let sparse: LoadedModel<F> = load_model(&a.sparse)?;
    let ids: Vec<usize> = (0..a.symbols)
        .map(|i| i % dense.config.vocab_size)
        .collect();
    let opts = BenchOptions {
        frames: a.frames,
        warmup: a.warmup,
        repeats: a.repeats,
    };
    let report = bench_decoder(
        (&dense.params, &dense.masks, &dense.config),
        (&sparse.params, &sparse.masks, &sparse.config),
        &ids,
        &opts,
    )?;
    print!("{}", report.to_text());
    if let Some(path) = &a.csv {
        std::fs::write(path, report.to_csv())?;
    }
    Ok(())
}
