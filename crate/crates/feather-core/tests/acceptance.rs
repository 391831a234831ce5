//! End-to-end acceptance gate: one test per numbered criterion, each
//! printing a single PASS or FAIL line (run with `--nocapture` to see
//! them). Trained models are built once and shared.

use feather_core::attention::{
    attend, initial_state, AttentionConfig, AttentionState, Mechanism, AttentionProjection,
    SQRT_TWO_PI,
};
use feather_core::bundle::{model_from_bytes, model_to_bytes, Storage};
use feather_core::data::{generate_with_threads, stress_suite, StressKind, ToyDataset, ToyTaskSpec};
use feather_core::model::{
    build_loss, eval_loss, infer, train_toy, InferOptions, ModelConfig, ModelMasks, ModelParams,
    TrainExample, TrainOptions, PARAM_NAMES,
};
use feather_core::robustness::{coverage_error, evaluate, summarize, RobustnessOptions};
use feather_core::scalar::softplus_inverse;
use feather_core::sparsity::{
    count_ops, lstm_step, prune_to, BlockMask, BlockSparseMatrix, Curve, KernelMat, LstmState,
    PruneSchedule,
};
use feather_core::timing::{bench_decoder, BenchOptions};
use feather_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::time::Instant;

fn check(criterion: usize, ok: bool, detail: String) {
    if ok {
        println!("PASS criterion {criterion}: {detail}");
    } else {
        println!("FAIL criterion {criterion}: {detail}");
        panic!("criterion {criterion} failed: {detail}");
    }
}

// ---------------------------------------------------------------- fixtures

struct Trained {
    config: ModelConfig,
    params: ModelParams<f32>,
    masks: ModelMasks,
}

struct Fixtures {
    /// Utterances 64..114 of the training distribution: same symbol
    /// prototypes, sequences the models never saw.
    heldout: Vec<TrainExample<f32>>,
    gaussian: Trained,
    gmm: Trained,
}

fn toy_spec() -> ToyTaskSpec {
    // vocab 32, 5..=20 symbols, 4 frames each, 16 mel bins, noise 0.02
    ToyTaskSpec::default()
}

fn train_one(mechanism: Mechanism, train: &ToyDataset) -> Trained {
    let attention = match mechanism {
        Mechanism::Gaussian => AttentionConfig::gaussian(),
        Mechanism::Gmmv2b => AttentionConfig::gmmv2b(5),
    };
    let config = ModelConfig {
        vocab_size: train.spec.vocab_size,
        embed_dim: 32,
        encoder_dim: 32,
        attn_rnn_dim: 64,
        decoder_rnn_dim: 64,
        mel_bins: train.spec.mel_bins,
        reduction: 2,
        postnet_dim: 64,
        postnet_delay: 5,
        stop_lambda: 0.1,
        attention,
    };
    let opts = TrainOptions {
        steps: 4000,
        lr: 0.1,
        momentum: 0.9,
        clip_norm: 1.0,
        log_every: 500,
        prune: None,
    };
    let mut params = ModelParams::<f32>::init(&config, 1).unwrap();
    let mut masks = ModelMasks::default();
    let report = train_toy(&mut params, &mut masks, &config, &train.examples(), &opts).unwrap();
    assert!(
        report.final_loss.is_finite(),
        "{} training diverged",
        mechanism.name()
    );
    Trained {
        config,
        params,
        masks,
    }
}

fn fixtures() -> &'static Fixtures {
    static CELL: OnceLock<Fixtures> = OnceLock::new();
    CELL.get_or_init(|| {
        let train = generate_with_threads(&toy_spec(), 1).unwrap();
        // per-utterance seeds derive from the index, so a longer run of
        // the same spec extends the corpus without changing it
        let extended = generate_with_threads(
            &ToyTaskSpec {
                count: toy_spec().count + 50,
                ..toy_spec()
            },
            1,
        )
        .unwrap();
        let heldout = extended
            .examples::<f32>()
            .split_off(toy_spec().count);
        Fixtures {
            heldout,
            gaussian: train_one(Mechanism::Gaussian, &train),
            gmm: train_one(Mechanism::Gmmv2b, &train),
        }
    })
}

/// Step budget generous enough for any input the suites produce.
fn decode_budget(symbols: usize) -> usize {
    3 * symbols + 50
}

// ---------------------------------------------------------------- criteria

#[test]
fn criterion_01_monotone_positions_over_random_steps() {
    let begin = Instant::now();
    let config = AttentionConfig::gaussian();
    let proj = random_projection(&config, 4, 17);
    let mut state = initial_state::<f64>(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut violations = 0usize;
    let mut prev = 0.0f64;
    for step in 0..1000 {
        let query: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (_, next) = attend(&proj, &config, &state, &query, 40).unwrap();
        let AttentionState::Gaussian(g) = &next else {
            panic!("gaussian mechanism produced a mixture state")
        };
        if !(g.mu > prev) || !(g.sigma > 0.0) || !(g.delta > 0.0) {
            violations += 1;
        }
        prev = g.mu;
        state = next;
        let _ = step;
    }
    let elapsed = begin.elapsed();
    check(
        1,
        violations == 0 && elapsed.as_secs_f64() < 1.0,
        format!(
            "1000 random steps, {violations} monotonicity violations, final position {prev:.2}, {:.3}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn random_projection(config: &AttentionConfig, hidden: usize, seed: u64) -> AttentionProjection<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = config.intermediate_dim();
    let mut weight = Tensor::zeros(vec![p, hidden]);
    for v in weight.data_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    AttentionProjection {
        weight,
        bias: Tensor::zeros(vec![p]),
    }
}

#[test]
fn criterion_02_alignment_value_checks() {
    // peg the position exactly on input 3: mu0 = 2, increment softplus^-1(1)
    let config = AttentionConfig {
        mu0: 2.0,
        bias_delta: softplus_inverse(1.0),
        ..AttentionConfig::gaussian()
    };
    let proj = AttentionProjection {
        weight: Tensor::<f64>::zeros(vec![2, 4]),
        bias: Tensor::zeros(vec![2]),
    };
    let state = initial_state::<f64>(&config).unwrap();
    let (a, next) = attend(&proj, &config, &state, &[0.0; 4], 6).unwrap();
    let mu_err = (next.position() - 3.0).abs();
    let peak_err = (a.weights[2] - 1.0).abs();
    let sym_err = (0..2)
        .map(|t| (a.weights[2 + t + 1] - a.weights[2 - t - 1]).abs())
        .fold(0.0f64, f64::max);

    // mixture weights sum to one under a random projection
    let gconf = AttentionConfig::gmmv2b(5);
    let gproj = random_projection(&gconf, 4, 29);
    let gstate = initial_state::<f64>(&gconf).unwrap();
    let (_, gnext) = attend(&gproj, &gconf, &gstate, &[0.3, -0.2, 0.9, -1.1], 8).unwrap();
    let AttentionState::Gmm(gs) = &gnext else {
        panic!("mixture mechanism produced a gaussian state")
    };
    let omega_sum: f64 = gs.components.iter().map(|c| c.omega).sum();
    let omega_err = (omega_sum - 1.0).abs();

    // K=1 mixture equals the 1/Z-scaled single gaussian
    let one = AttentionConfig {
        bias_sigma: softplus_inverse(1.25),
        ..AttentionConfig::gmmv2b(1)
    };
    let zero_proj = AttentionProjection {
        weight: Tensor::<f64>::zeros(vec![3, 4]),
        bias: Tensor::zeros(vec![3]),
    };
    let (ga, gn) = attend(
        &zero_proj,
        &one,
        &initial_state::<f64>(&one).unwrap(),
        &[0.0; 4],
        6,
    )
    .unwrap();
    // the weights must equal the plain gaussian bell scaled by 1/Z
    let AttentionState::Gmm(g1) = &gn else { panic!() };
    let (mu1, sigma1) = (g1.components[0].mu, g1.components[0].sigma);
    let z = SQRT_TWO_PI * sigma1;
    let mut k1_err = 0.0f64;
    for (j, w) in ga.weights.iter().enumerate() {
        let d = (j + 1) as f64 - mu1;
        let reference = (-d * d / (2.0 * sigma1 * sigma1)).exp() / z;
        k1_err = k1_err.max((w - reference).abs());
    }

    let ok = mu_err < 1e-6 && peak_err < 1e-6 && sym_err < 1e-6 && omega_err < 1e-6 && k1_err < 1e-6;
    check(
        2,
        ok,
        format!(
            "position err {mu_err:.2e}, peak err {peak_err:.2e}, symmetry err {sym_err:.2e}, omega sum err {omega_err:.2e}, K=1 vs scaled gaussian err {k1_err:.2e}"
        ),
    );
}

#[test]
fn criterion_03_finite_difference_gradients() {
    let begin = Instant::now();
    let config = ModelConfig {
        vocab_size: 6,
        embed_dim: 4,
        encoder_dim: 4,
        attn_rnn_dim: 8,
        decoder_rnn_dim: 8,
        mel_bins: 3,
        reduction: 2,
        postnet_dim: 4,
        postnet_delay: 2,
        stop_lambda: 0.01,
        attention: AttentionConfig::gaussian(),
    };
    let mut params = ModelParams::<f64>::init(&config, 31).unwrap();
    let ids = vec![1, 3, 2, 5, 0];
    let mut rng = ChaCha8Rng::seed_from_u64(97);
    let t_frames = 9;
    let mel = Tensor::new(
        vec![t_frames, config.mel_bins],
        (0..t_frames * config.mel_bins)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();

    let example = TrainExample {
        ids: ids.clone(),
        mel: mel.clone(),
    };
    let mut tape = Tape::new();
    let graph = build_loss(&mut tape, &params, &config, &ids, &mel).unwrap();
    let grads = tape.backward(graph.total).unwrap();
    let analytic: Vec<Vec<f64>> = graph
        .leaves
        .iter()
        .map(|&l| grads.get(l).unwrap().to_vec())
        .collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for p in 0..PARAM_NAMES.len() {
        for k in 0..params.tensors()[p].1.numel() {
            let orig = params.tensors()[p].1.data()[k];
            params.tensors_mut()[p].1.data_mut()[k] = orig + h;
            let up = eval_loss(&params, &config, &example).unwrap().total;
            params.tensors_mut()[p].1.data_mut()[k] = orig - h;
            let down = eval_loss(&params, &config, &example).unwrap().total;
            params.tensors_mut()[p].1.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[p][k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            checked += 1;
        }
    }
    let elapsed = begin.elapsed().as_secs_f64();
    check(
        3,
        worst < 1e-4 && elapsed < 120.0,
        format!("{checked} parameters, worst relative error {worst:.2e}, {elapsed:.1}s"),
    );
}

#[test]
fn criterion_04_stop_rule_and_trained_stop_accuracy() {
    // (a) the architecture has no stop predictor to learn
    let no_stop_head = !PARAM_NAMES.iter().any(|n| n.contains("stop"));

    // (b) inference halts at the first crossing across random models
    let config = ModelConfig {
        vocab_size: 8,
        embed_dim: 6,
        encoder_dim: 8,
        attn_rnn_dim: 12,
        decoder_rnn_dim: 12,
        mel_bins: 4,
        reduction: 2,
        postnet_dim: 6,
        postnet_delay: 2,
        stop_lambda: 0.1,
        attention: AttentionConfig::gaussian(),
    };
    let ids = [0usize, 3, 5, 1, 7, 2];
    let opts = InferOptions { max_steps: 60 };
    let threshold = (ids.len() + 1) as f64;
    let mut first_crossing_violations = 0usize;
    for seed in 0..100u64 {
        let params = ModelParams::<f32>::init(&config, seed).unwrap();
        let out = infer(&params, &ModelMasks::default(), &config, &ids, &opts).unwrap();
        if out.trace.truncated {
            if out.steps != opts.max_steps {
                first_crossing_violations += 1;
            }
            continue;
        }
        let pos = &out.trace.positions;
        let body_ok = pos[..pos.len() - 1].iter().all(|&p| p < threshold);
        let final_ok = *pos.last().unwrap() >= threshold;
        if !(body_ok && final_ok) {
            first_crossing_violations += 1;
        }
    }

    // (c) the trained model parks the final position near J+1
    let fx = fixtures();
    let mut stop_sum = 0.0f64;
    for ex in &fx.heldout {
        stop_sum += eval_loss(&fx.gaussian.params, &fx.gaussian.config, ex)
            .unwrap()
            .stop;
    }
    let mean_stop = stop_sum / fx.heldout.len() as f64;

    check(
        4,
        no_stop_head && first_crossing_violations == 0 && mean_stop < 1.0,
        format!(
            "no stop head, 100 random models halt at the first crossing, held-out mean |mu_T - (J+1)| = {mean_stop:.3}"
        ),
    );
}

#[test]
fn criterion_05_toy_convergence() {
    let begin = Instant::now();
    let fx = fixtures();
    let g = &fx.gaussian;

    let mut l1_sum = 0.0f64;
    let mut coverage_sum = 0.0f64;
    let n = fx.heldout.len();
    for ex in &fx.heldout {
        l1_sum += eval_loss(&g.params, &g.config, ex).unwrap().l1_pre;
        let out = infer(
            &g.params,
            &g.masks,
            &g.config,
            &ex.ids,
            &InferOptions {
                max_steps: decode_budget(ex.ids.len()),
            },
        )
        .unwrap();
        coverage_sum += coverage_error(&out.trace.alignments, ex.ids.len(), 0.3);
    }
    let l1 = l1_sum / n as f64;
    let coverage = coverage_sum / n as f64;
    let elapsed = begin.elapsed().as_secs_f64();
    check(
        5,
        l1 < 0.1 && coverage < 0.05,
        format!(
            "held-out frame L1 {l1:.4} (< 0.1), coverage error {coverage:.4} (< 0.05) over {n} utterances, {elapsed:.1}s after training"
        ),
    );
}

#[test]
fn criterion_06_pruning_schedule_tracks_the_curve() {
    let schedule = PruneSchedule {
        target_sparsity: 0.9,
        start_step: 2000,
        interval: 50,
        end_step: 20000,
        curve: Curve::Cubic,
    };
    schedule.validate().unwrap();

    let rows = 512;
    let cols = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut weights = Tensor::<f32>::zeros(vec![rows, cols]);
    for v in weights.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut mask = BlockMask::full(rows, cols, 16, 1).unwrap();
    let granule = 1.0 / mask.n_blocks() as f64;

    let mut worst_gap = 0.0f64;
    let mut monotone = true;
    let mut zeros_hold = true;
    for step in 0..=21_000usize {
        if !schedule.is_prune_step(step) {
            continue;
        }
        // training drifts weights between events; pruned ones must stay 0
        for v in weights.data_mut() {
            *v += rng.gen_range(-0.01..0.01);
        }
        mask.apply(&mut weights).unwrap();

        let before = mask.clone();
        mask = prune_to(&weights, &mask, schedule.sparsity_at(step)).unwrap();
        for b in 0..mask.n_blocks() {
            if mask.is_kept(b) && !before.is_kept(b) {
                monotone = false;
            }
        }
        mask.apply(&mut weights).unwrap();
        worst_gap = worst_gap.max((mask.sparsity() - schedule.sparsity_at(step)).abs());

        if step % 4000 == 0 || step >= schedule.end_step {
            let sparse = BlockSparseMatrix::from_dense(&weights, &mask).unwrap();
            let dense_back = sparse.to_masked_dense();
            if !dense_back.bits_eq(&weights) {
                zeros_hold = false;
            }
        }
    }
    let final_sparsity = mask.sparsity();
    check(
        6,
        worst_gap <= granule && monotone && zeros_hold && (final_sparsity - 0.9).abs() <= granule,
        format!(
            "worst curve gap {worst_gap:.2e} (granule {granule:.2e}), monotone {monotone}, masked weights exact, final sparsity {final_sparsity:.4}"
        ),
    );
}

#[test]
fn criterion_07_multiply_count_accounting() {
    let mut lines = Vec::new();
    let mut ok = true;
    for (i, h) in [(64usize, 64usize), (256, 256), (128, 256)] {
        let rows = 4 * h;
        let cols = i + h;
        let mut rng = ChaCha8Rng::seed_from_u64((i + h) as u64);
        let mut kernel = Tensor::<f32>::zeros(vec![rows, cols]);
        for v in kernel.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let full = BlockMask::full(rows, cols, 16, 1).unwrap();
        let mask = prune_to(&kernel, &full, 0.9).unwrap();
        let sparse = BlockSparseMatrix::from_dense(&kernel, &mask).unwrap();

        let x: Vec<f32> = (0..cols).map(|k| (k as f32 * 0.01).sin()).collect();
        let mut counted = 0u64;
        sparse.matvec_counting(&x, &mut counted).unwrap();

        let predicted = count_ops(i, h, 0.9);
        let granule = 16.0;
        let gap = (counted as f64 - predicted).abs();
        ok &= gap <= granule;
        lines.push(format!("({i},{h}): counted {counted} vs {predicted:.1}"));
    }
    let formatted = format!("{:.1}", count_ops(256, 256, 0.9));
    ok &= formatted == "52428.8";
    check(
        7,
        ok,
        format!("{}; printed form {formatted}", lines.join("; ")),
    );
}

#[test]
fn criterion_08_sparse_dense_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let mut worst = 0.0f32;
    for _ in 0..1000 {
        let h = 8 * rng.gen_range(1..=6usize);
        let i = rng.gen_range(4..=48usize);
        let rows = 4 * h;
        let cols = i + h;
        let mut kernel = Tensor::<f32>::zeros(vec![rows, cols]);
        for v in kernel.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let block_rows = if h % 16 == 0 && rng.gen_bool(0.5) { 16 } else { 8 };
        let full = BlockMask::full(rows, cols, block_rows, 1).unwrap();
        let mask = prune_to(&kernel, &full, rng.gen_range(0.0..0.95)).unwrap();

        let mut masked = kernel.clone();
        mask.apply(&mut masked).unwrap();
        let sparse = KernelMat::Sparse(BlockSparseMatrix::from_dense(&kernel, &mask).unwrap());
        let dense = KernelMat::Dense(masked);

        let bias: Vec<f32> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f32> = (0..i).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let state = LstmState {
            h: (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            c: (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let a = lstm_step(&sparse, &bias, &x, &state, None).unwrap();
        let b = lstm_step(&dense, &bias, &x, &state, None).unwrap();
        for ((ha, hb), (ca, cb)) in a.h.iter().zip(b.h.iter()).zip(a.c.iter().zip(b.c.iter())) {
            worst = worst.max((ha - hb).abs()).max((ca - cb).abs());
        }
    }
    check(
        8,
        worst < 1e-5,
        format!("1000 random steps, max |sparse - masked dense| = {worst:.2e}"),
    );
}

#[test]
fn criterion_09_decoder_loop_speedup() {
    let config = ModelConfig {
        vocab_size: 32,
        embed_dim: 32,
        encoder_dim: 64,
        attn_rnn_dim: 256,
        decoder_rnn_dim: 256,
        mel_bins: 20,
        reduction: 2,
        postnet_dim: 32,
        postnet_delay: 5,
        stop_lambda: 0.001,
        attention: AttentionConfig::gaussian(),
    };
    let mut params = ModelParams::<f32>::init(&config, 71).unwrap();
    let full_a = BlockMask::full(4 * 256, config.attn_input_dim() + 256, 16, 1).unwrap();
    let full_d = BlockMask::full(4 * 256, config.dec_input_dim() + 256, 16, 1).unwrap();
    let masks = ModelMasks {
        attn_lstm: Some(prune_to(&params.attn_lstm_w, &full_a, 0.9).unwrap()),
        dec_lstm: Some(prune_to(&params.dec_lstm_w, &full_d, 0.9).unwrap()),
    };
    masks.apply(&mut params).unwrap();

    let ids: Vec<usize> = (0..20).collect();
    let report = bench_decoder(
        (&params, &ModelMasks::default(), &config),
        (&params, &masks, &config),
        &ids,
        &BenchOptions {
            frames: 512,
            warmup: 2,
            repeats: 5,
        },
    )
    .unwrap();

    let ratio = report.sparse.multiplies_per_step / report.dense.multiplies_per_step;
    // one 16-element block per kernel of slack on the 10x reduction
    let ratio_ok = ratio <= 0.1 + 32.0 / report.dense.multiplies_per_step;
    let speedup = report.speedup;
    let soft_met = speedup >= 2.0;
    let detail = format!(
        "multiply ratio {ratio:.4} (hard <= ~0.1), wall speedup {speedup:.2}x{}",
        if soft_met {
            String::new()
        } else {
            " (soft 2.0x target missed on this machine)".to_string()
        }
    );
    check(9, ratio_ok && speedup >= 1.0, detail);
}

#[test]
fn criterion_10_stress_suite_comparison() {
    let fx = fixtures();
    let spec = ToyTaskSpec {
        count: 10,
        seed: 77,
        ..toy_spec()
    };
    let mut aggregates = Vec::new();
    for model in [&fx.gaussian, &fx.gmm] {
        let mut all = Vec::new();
        for kind in StressKind::ALL {
            let inputs = stress_suite(kind, &spec).unwrap();
            let budget = inputs.iter().map(|ids| decode_budget(ids.len())).max().unwrap();
            let opts = RobustnessOptions {
                max_steps: budget,
                ..RobustnessOptions::default()
            };
            all.extend(evaluate(&model.params, &model.masks, &model.config, &inputs, &opts).unwrap());
        }
        aggregates.push(summarize("combined", &all).aggregate());
    }
    let (gauss, gmm) = (aggregates[0], aggregates[1]);
    check(
        10,
        gauss <= gmm,
        format!("combined aggregate: gaussian {gauss:.4} <= gmmv2b {gmm:.4}"),
    );
}

#[test]
fn criterion_11_serialization_round_trips() {
    let fx = fixtures();
    let g = &fx.gaussian;

    // byte-identical save -> load -> save
    let dense_bytes = model_to_bytes(&g.params, &g.masks, &g.config, Storage::Dense).unwrap();
    let loaded = model_from_bytes::<f32>(&dense_bytes).unwrap();
    let again = model_to_bytes(&loaded.params, &loaded.masks, &loaded.config, Storage::Dense).unwrap();
    let bytes_identical = dense_bytes == again;

    // offline prune (through the file format) matches in-memory prune
    let target = 0.9;
    let prune_pair = |params: &ModelParams<f32>| -> ModelMasks {
        let fa = BlockMask::full(params.attn_lstm_w.rows(), params.attn_lstm_w.cols(), 16, 1)
            .unwrap();
        let fd = BlockMask::full(params.dec_lstm_w.rows(), params.dec_lstm_w.cols(), 16, 1)
            .unwrap();
        ModelMasks {
            attn_lstm: Some(prune_to(&params.attn_lstm_w, &fa, target).unwrap()),
            dec_lstm: Some(prune_to(&params.dec_lstm_w, &fd, target).unwrap()),
        }
    };

    let mut in_memory = g.params.clone();
    let mem_masks = prune_pair(&in_memory);
    mem_masks.apply(&mut in_memory).unwrap();

    let mut offline = model_from_bytes::<f32>(&dense_bytes).unwrap();
    let off_masks = prune_pair(&offline.params);
    off_masks.apply(&mut offline.params).unwrap();
    let sparse_bytes =
        model_to_bytes(&offline.params, &off_masks, &offline.config, Storage::Sparse).unwrap();
    let reloaded = model_from_bytes::<f32>(&sparse_bytes).unwrap();

    let ids = vec![4usize, 9, 1, 16, 2, 30, 7];
    let opts = InferOptions {
        max_steps: decode_budget(ids.len()),
    };
    let a = infer(&in_memory, &mem_masks, &g.config, &ids, &opts).unwrap();
    let b = infer(&reloaded.params, &reloaded.masks, &reloaded.config, &ids, &opts).unwrap();
    let outputs_identical = a.mel_pre.bits_eq(&b.mel_pre)
        && a.mel_post.bits_eq(&b.mel_post)
        && a.steps == b.steps
        && a.trace.positions == b.trace.positions;

    check(
        11,
        bytes_identical && outputs_identical,
        format!(
            "save/load/save byte-identical ({} bytes), offline-pruned decode bit-equal to in-memory over {} steps",
            dense_bytes.len(),
            a.steps
        ),
    );
}
