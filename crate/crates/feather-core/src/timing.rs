//! Wall-clock benchmarking of the autoregressive decoder loop.
//!
//! The timed region is the per-step work the pruning targets: the two
//! recurrent kernels, the attention update, the context reduction and
//! the output head. Encoding, kernel packing and the post-net run
//! outside it. Runs are single-threaded by contract; each
//! measurement is the median over several repeats after a warmup, so
//! an occasional scheduler hiccup does not skew the result.

use crate::attention::{attend, context_vector, initial_state, AttentionProjection};
use crate::error::{FeatherError, Result};
use crate::model::{affine, encode_plain, ModelConfig, ModelMasks, ModelParams};
use crate::scalar::Scalar;
use crate::sparsity::{count_ops, BlockSparseMatrix, KernelMat, LstmState, lstm_step};
use crate::tensor::Tensor;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Frames to decode per timed run (steps = frames / reduction).
    pub frames: usize,
    /// Untimed runs before measurement.
    pub warmup: usize,
    /// Timed runs; the median is reported.
    pub repeats: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            frames: 512,
            warmup: 2,
            repeats: 5,
        }
    }
}

impl BenchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.repeats == 0 {
            return Err(FeatherError::Config(
                "bench needs at least one frame and one repeat".into(),
            ));
        }
        Ok(())
    }
}

/// Measurements for one kernel layout.
#[derive(Debug, Clone)]
pub struct BenchSide {
    pub label: String,
    /// Fraction of zeroed weights in the two recurrent kernels.
    pub attn_sparsity: f64,
    pub dec_sparsity: f64,
    pub median_ns: u64,
    pub frames_per_sec: f64,
    /// Counted multiplies per decode step in the two kernels.
    pub multiplies_per_step: f64,
    /// `4(1-S)(I*H + H^2)` summed over both kernels.
    pub predicted_multiplies_per_step: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub attn_dims: (usize, usize),
    pub dec_dims: (usize, usize),
    /// Block shape of the sparse side's masks, when any.
    pub block_shape: Option<(usize, usize)>,
    pub frames: usize,
    pub steps: usize,
    pub dense: BenchSide,
    pub sparse: BenchSide,
    /// dense median time / sparse median time.
    pub speedup: f64,
}

struct PackedDecoder<'a, F: Scalar> {
    params: &'a ModelParams<F>,
    config: &'a ModelConfig,
    enc: Tensor<F>,
    attn_kernel: KernelMat<F>,
    dec_kernel: KernelMat<F>,
    j_len: usize,
}

impl<'a, F: Scalar> PackedDecoder<'a, F> {
    fn pack(
        params: &'a ModelParams<F>,
        masks: &ModelMasks,
        config: &'a ModelConfig,
        ids: &[usize],
    ) -> Result<Self> {
        config.validate()?;
        let enc = encode_plain(params, config, ids)?;
        let attn_kernel = match &masks.attn_lstm {
            Some(m) => KernelMat::Sparse(BlockSparseMatrix::from_dense(&params.attn_lstm_w, m)?),
            None => KernelMat::Dense(params.attn_lstm_w.clone()),
        };
        let dec_kernel = match &masks.dec_lstm {
            Some(m) => KernelMat::Sparse(BlockSparseMatrix::from_dense(&params.dec_lstm_w, m)?),
            None => KernelMat::Dense(params.dec_lstm_w.clone()),
        };
        Ok(PackedDecoder {
            params,
            config,
            enc,
            attn_kernel,
            dec_kernel,
            j_len: ids.len(),
        })
    }

    /// One decode pass of exactly `steps` steps, ignoring the stop
    /// rule so every run does identical work.
    fn run(&self, steps: usize) -> Result<(u64, F)> {
        let config = self.config;
        let fps = config.frames_per_step();
        let proj = AttentionProjection {
            weight: self.params.attn_proj_w.clone(),
            bias: self.params.attn_proj_b.clone(),
        };
        let mut attn_state = initial_state(&config.attention)?;
        let mut s_a = LstmState::zeros(config.attn_rnn_dim);
        let mut s_d = LstmState::zeros(config.decoder_rnn_dim);
        let mut ctx = vec![F::zero(); config.context_dim()];
        let mut y_prev = vec![F::zero(); fps];
        let mut multiplies = 0u64;
        let mut checksum = F::zero();

        for _ in 0..steps {
            let mut x_a = Vec::with_capacity(ctx.len() + fps);
            x_a.extend_from_slice(&ctx);
            x_a.extend_from_slice(&y_prev);
            s_a = lstm_step(
                &self.attn_kernel,
                self.params.attn_lstm_b.data(),
                &x_a,
                &s_a,
                Some(&mut multiplies),
            )?;

            let (alignment, next) = attend(&proj, &config.attention, &attn_state, &s_a.h, self.j_len)?;
            attn_state = next;
            ctx = context_vector(&alignment.weights, &self.enc)?;

            let mut x_d = Vec::with_capacity(ctx.len() + s_a.h.len());
            x_d.extend_from_slice(&ctx);
            x_d.extend_from_slice(&s_a.h);
            s_d = lstm_step(
                &self.dec_kernel,
                self.params.dec_lstm_b.data(),
                &x_d,
                &s_d,
                Some(&mut multiplies),
            )?;

            y_prev = affine(&self.params.out_w, &self.params.out_b, &s_d.h)?;
            checksum = checksum + y_prev[0];
        }
        Ok((multiplies, checksum))
    }
}

fn median_ns(mut samples: Vec<u64>) -> u64 {
    samples.sort_unstable();
    samples[samples.len() / 2]
}

fn time_side<F: Scalar>(decoder: &PackedDecoder<'_, F>, steps: usize, opts: &BenchOptions) -> Result<(u64, u64)> {
    let mut multiplies = 0;
    for _ in 0..opts.warmup {
        multiplies = std::hint::black_box(decoder.run(steps)?).0;
    }
    let mut samples = Vec::with_capacity(opts.repeats);
    for _ in 0..opts.repeats {
        let begin = Instant::now();
        let out = decoder.run(steps)?;
        let elapsed = begin.elapsed().as_nanos() as u64;
        std::hint::black_box(out.1);
        multiplies = out.0;
        samples.push(elapsed.max(1));
    }
    Ok((median_ns(samples), multiplies))
}

fn side_report(
    label: &str,
    masks: &ModelMasks,
    config: &ModelConfig,
    median: u64,
    multiplies: u64,
    steps: usize,
    frames: usize,
) -> BenchSide {
    let attn_s = masks.attn_lstm.as_ref().map_or(0.0, |m| m.sparsity());
    let dec_s = masks.dec_lstm.as_ref().map_or(0.0, |m| m.sparsity());
    let predicted = count_ops(config.attn_input_dim(), config.attn_rnn_dim, attn_s)
        + count_ops(config.dec_input_dim(), config.decoder_rnn_dim, dec_s);
    BenchSide {
        label: label.to_string(),
        attn_sparsity: attn_s,
        dec_sparsity: dec_s,
        median_ns: median,
        frames_per_sec: frames as f64 / (median as f64 * 1e-9),
        multiplies_per_step: multiplies as f64 / steps as f64,
        predicted_multiplies_per_step: predicted,
    }
}

/// Time identical fixed-length decodes through dense and sparse
/// kernels and report the relative speedup.
pub fn bench_decoder<F: Scalar>(
    dense: (&ModelParams<F>, &ModelMasks, &ModelConfig),
    sparse: (&ModelParams<F>, &ModelMasks, &ModelConfig),
    ids: &[usize],
    opts: &BenchOptions,
) -> Result<BenchReport> {
    opts.validate()?;
    if dense.2 != sparse.2 {
        return Err(FeatherError::Config(
            "benchmark sides must share one architecture".into(),
        ));
    }
    let config = dense.2;
    let steps = opts.frames.div_ceil(config.reduction).max(1);
    let frames = steps * config.reduction;

    let packed_dense = PackedDecoder::pack(dense.0, dense.1, config, ids)?;
    let packed_sparse = PackedDecoder::pack(sparse.0, sparse.1, sparse.2, ids)?;

    let (dense_ns, dense_mults) = time_side(&packed_dense, steps, opts)?;
    let (sparse_ns, sparse_mults) = time_side(&packed_sparse, steps, opts)?;

    Ok(BenchReport {
        attn_dims: (config.attn_input_dim(), config.attn_rnn_dim),
        dec_dims: (config.dec_input_dim(), config.decoder_rnn_dim),
        block_shape: sparse
            .1
            .attn_lstm
            .as_ref()
            .or(sparse.1.dec_lstm.as_ref())
            .map(|m| m.block_shape()),
        frames,
        steps,
        dense: side_report("dense", dense.1, config, dense_ns, dense_mults, steps, frames),
        sparse: side_report("sparse", sparse.1, sparse.2, sparse_ns, sparse_mults, steps, frames),
        speedup: dense_ns as f64 / sparse_ns as f64,
    })
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "side,median_ns,frames_per_sec,multiplies_per_step,predicted_multiplies_per_step,speedup_vs_dense\n",
        );
        for (side, speedup) in [(&self.dense, 1.0), (&self.sparse, self.speedup)] {
            out.push_str(&format!(
                "{},{},{:.1},{:.1},{:.1},{:.3}\n",
                side.label,
                side.median_ns,
                side.frames_per_sec,
                side.multiplies_per_step,
                side.predicted_multiplies_per_step,
                speedup
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let block = match self.block_shape {
            Some((r, c)) => format!("{r}x{c}"),
            None => "none".to_string(),
        };
        let mut out = String::new();
        out.push_str(&format!(
            "decoder loop: {} frames in {} steps, attention kernel {}x{}, decoder kernel {}x{}, blocks {block}, single-threaded\n",
            self.frames,
            self.steps,
            4 * self.attn_dims.1,
            self.attn_dims.0 + self.attn_dims.1,
            4 * self.dec_dims.1,
            self.dec_dims.0 + self.dec_dims.1,
        ));
        for side in [&self.dense, &self.sparse] {
            out.push_str(&format!(
                "  {:<6} sparsity {:.2}/{:.2}  median {:>12} ns  {:>12.1} frames/s  {:>12.1} multiplies/step (predicted {:.1})\n",
                side.label,
                side.attn_sparsity,
                side.dec_sparsity,
                side.median_ns,
                side.frames_per_sec,
                side.multiplies_per_step,
                side.predicted_multiplies_per_step,
            ));
        }
        out.push_str(&format!("  speedup (dense/sparse): {:.2}x\n", self.speedup));
        out
    }
}
