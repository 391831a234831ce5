//! Plain (tape-free) inference: free-running decode with the stop rule
//! and the delayed post-net.
//!
//! Every kernel here mirrors its tape counterpart operation for
//! operation, so a trained model produces the same values at inference
//! that it produced during training forward passes.

use crate::attention::{
    attend, context_vector, initial_state, AlignmentVector, AttentionProjection,
};
use crate::error::{FeatherError, Result};
use crate::scalar::Scalar;
use crate::sparsity::{dense_matvec, lstm_step, BlockSparseMatrix, KernelMat, LstmState};
use crate::tensor::Tensor;

use super::{ModelConfig, ModelMasks, ModelParams};

#[derive(Debug, Clone, Copy)]
pub struct InferOptions {
    /// Decode-step budget before giving up on the stop rule.
    pub max_steps: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions { max_steps: 400 }
    }
}

/// Per-step decode diagnostics.
#[derive(Debug, Clone)]
pub struct DecodeTrace<F: Scalar> {
    pub alignments: Vec<AlignmentVector<F>>,
    /// Attention position after each step.
    pub positions: Vec<f64>,
    /// True when the step budget ran out before the stop rule fired.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct InferOutput<F: Scalar> {
    /// Coarse decoder frames `[steps * reduction x mel_bins]`.
    pub mel_pre: Tensor<F>,
    /// Post-net refined frames, aligned with `mel_pre`.
    pub mel_post: Tensor<F>,
    pub trace: DecodeTrace<F>,
    pub steps: usize,
    /// Scalar multiplies spent in the two recurrent decoder kernels
    /// (the prunable ones) over the whole decode.
    pub multiplies: u64,
}

fn check_ids(config: &ModelConfig, ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(FeatherError::Input("utterance has no symbols".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&v| v >= config.vocab_size) {
        return Err(FeatherError::Input(format!(
            "symbol id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Bidirectional tanh encoder, plain form. Returns `[J x encoder_dim]`.
pub(crate) fn encode_plain<F: Scalar>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    ids: &[usize],
) -> Result<Tensor<F>> {
    check_ids(config, ids)?;
    let he = config.enc_half();
    let j_len = ids.len();

    let run = |w: &Tensor<F>, b: &Tensor<F>, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Vec<F>>> {
        let mut states = vec![Vec::new(); j_len];
        let mut h = vec![F::zero(); he];
        for j in order {
            let x = params.embedding.row(ids[j]);
            let mut xh = Vec::with_capacity(x.len() + he);
            xh.extend_from_slice(x);
            xh.extend_from_slice(&h);
            let lin = dense_matvec(w, &xh)?;
            h = lin
                .iter()
                .zip(b.data().iter())
                .map(|(a, bias)| (*a + *bias).tanh())
                .collect();
            states[j] = h.clone();
        }
        Ok(states)
    };

    let fwd = run(&params.enc_fwd_w, &params.enc_fwd_b, &mut (0..j_len))?;
    let bwd = run(&params.enc_bwd_w, &params.enc_bwd_b, &mut (0..j_len).rev())?;

    let mut data = Vec::with_capacity(j_len * config.encoder_dim);
    for j in 0..j_len {
        data.extend_from_slice(&fwd[j]);
        data.extend_from_slice(&bwd[j]);
    }
    Tensor::new(vec![j_len, config.encoder_dim], data)
}

pub(crate) fn affine<F: Scalar>(w: &Tensor<F>, b: &Tensor<F>, x: &[F]) -> Result<Vec<F>> {
    let lin = dense_matvec(w, x)?;
    Ok(lin
        .iter()
        .zip(b.data().iter())
        .map(|(a, bias)| *a + *bias)
        .collect())
}

/// Post-net over the decoded frames: a frame-level LSTM whose output at
/// step `tau` re-predicts frame `tau - delay` (with a residual from the
/// coarse frame). The net runs `delay` extra flush steps on zero input
/// so every coarse frame gets a refined counterpart.
fn postnet_plain<F: Scalar>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    mel_pre: &Tensor<F>,
) -> Result<Tensor<F>> {
    let t_frames = mel_pre.rows();
    let m = config.mel_bins;
    let d = config.postnet_delay;
    let kernel = KernelMat::Dense(params.post_lstm_w.clone());
    let mut state = LstmState::zeros(config.postnet_dim);
    let zeros = vec![F::zero(); m];
    let mut out = Vec::with_capacity(t_frames * m);
    for tau in 0..t_frames + d {
        let x = if tau < t_frames { mel_pre.row(tau) } else { &zeros[..] };
        state = lstm_step(&kernel, params.post_lstm_b.data(), x, &state, None)?;
        if tau < d {
            continue;
        }
        let mut y2 = affine(&params.post_out_w, &params.post_out_b, &state.h)?;
        for (v, res) in y2.iter_mut().zip(mel_pre.row(tau - d).iter()) {
            *v = *v + *res;
        }
        out.extend_from_slice(&y2);
    }
    Tensor::new(vec![t_frames, m], out)
}

/// Free-running decode: feed back the model's own frames, stop at the
/// first step whose attention position reaches `J + 1`, refine with the
/// post-net.
pub fn infer<F: Scalar>(
    params: &ModelParams<F>,
    masks: &ModelMasks,
    config: &ModelConfig,
    ids: &[usize],
    opts: &InferOptions,
) -> Result<InferOutput<F>> {
    config.validate()?;
    if opts.max_steps == 0 {
        return Err(FeatherError::Config("max_steps must be positive".into()));
    }
    let enc = encode_plain(params, config, ids)?;
    let j_len = ids.len();
    let m = config.mel_bins;
    let fps = config.frames_per_step();

    let proj = AttentionProjection {
        weight: params.attn_proj_w.clone(),
        bias: params.attn_proj_b.clone(),
    };
    let attn_kernel = match &masks.attn_lstm {
        Some(mask) => KernelMat::Sparse(BlockSparseMatrix::from_dense(&params.attn_lstm_w, mask)?),
        None => KernelMat::Dense(params.attn_lstm_w.clone()),
    };
    let dec_kernel = match &masks.dec_lstm {
        Some(mask) => KernelMat::Sparse(BlockSparseMatrix::from_dense(&params.dec_lstm_w, mask)?),
        None => KernelMat::Dense(params.dec_lstm_w.clone()),
    };

    let mut attn_state = initial_state(&config.attention)?;
    let mut s_a = LstmState::zeros(config.attn_rnn_dim);
    let mut s_d = LstmState::zeros(config.decoder_rnn_dim);
    let mut ctx = vec![F::zero(); config.context_dim()];
    let mut y_prev = vec![F::zero(); fps];

    let mut frames = Vec::new();
    let mut alignments = Vec::new();
    let mut positions = Vec::new();
    let mut multiplies = 0u64;
    let mut truncated = true;
    let mut steps = 0usize;
    let threshold = F::from_f64c((j_len + 1) as f64);

    for _ in 0..opts.max_steps {
        let mut x_a = Vec::with_capacity(ctx.len() + fps);
        x_a.extend_from_slice(&ctx);
        x_a.extend_from_slice(&y_prev);
        s_a = lstm_step(
            &attn_kernel,
            params.attn_lstm_b.data(),
            &x_a,
            &s_a,
            Some(&mut multiplies),
        )?;

        let (alignment, next_state) = attend(&proj, &config.attention, &attn_state, &s_a.h, j_len)?;
        attn_state = next_state;
        ctx = context_vector(&alignment.weights, &enc)?;

        let mut x_d = Vec::with_capacity(ctx.len() + s_a.h.len());
        x_d.extend_from_slice(&ctx);
        x_d.extend_from_slice(&s_a.h);
        s_d = lstm_step(
            &dec_kernel,
            params.dec_lstm_b.data(),
            &x_d,
            &s_d,
            Some(&mut multiplies),
        )?;

        let y = affine(&params.out_w, &params.out_b, &s_d.h)?;
        let position = attn_state.position();
        if !position.is_finite() {
            return Err(FeatherError::NonFinite { op: "infer" });
        }
        frames.extend_from_slice(&y);
        alignments.push(alignment);
        positions.push(position.to_f64c());
        y_prev = y;
        steps += 1;

        if position >= threshold {
            truncated = false;
            break;
        }
    }

    let mel_pre = Tensor::new(vec![steps * config.reduction, m], frames)?;
    let mel_post = postnet_plain(params, config, &mel_pre)?;
    Ok(InferOutput {
        mel_pre,
        mel_post,
        trace: DecodeTrace {
            alignments,
            positions,
            truncated,
        },
        steps,
        multiplies,
    })
}
