//! Differentiable forward pass and the toy training loop.
//!
//! Training is teacher-forced: the decoder consumes ground-truth frames
//! from the previous step while the post-net consumes the decoder's own
//! predictions. Each step builds a fresh tape, runs one backward pass,
//! clips the global gradient norm and applies plain SGD; prune events
//! grow the block masks and masked weights stay exactly zero.

use crate::attention::{attend_tape, initial_state_tape, TapeAttentionParams};
use crate::error::{FeatherError, Result};
use crate::scalar::Scalar;
use crate::sparsity::{prune_to, BlockMask, PruneSchedule};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

use super::{ModelConfig, ModelMasks, ModelParams, PARAM_NAMES};

/// One training utterance: symbol ids and the target frames `[T x M]`.
#[derive(Debug, Clone)]
pub struct TrainExample<F: Scalar> {
    pub ids: Vec<usize>,
    pub mel: Tensor<F>,
}

/// Handles into a built loss graph.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub total: ValueId,
    pub l1_pre: ValueId,
    pub l1_post: ValueId,
    pub stop: ValueId,
    /// Attention position after the final decode step.
    pub final_position: ValueId,
    /// Coarse decoder output per step, each `[mel_bins * reduction]`.
    pub step_outputs: Vec<ValueId>,
    /// Parameter leaves in canonical order (see [`PARAM_NAMES`]).
    pub leaves: Vec<ValueId>,
}

/// Loss values read off a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1_pre: f64,
    pub l1_post: f64,
    pub stop: f64,
    pub final_position: f64,
}

/// Parameter leaves with names matching [`ModelParams`] fields.
pub(crate) struct TapeParams {
    embedding: ValueId,
    enc_fwd_w: ValueId,
    enc_fwd_b: ValueId,
    enc_bwd_w: ValueId,
    enc_bwd_b: ValueId,
    attn_lstm_w: ValueId,
    attn_lstm_b: ValueId,
    attn_proj_w: ValueId,
    attn_proj_b: ValueId,
    dec_lstm_w: ValueId,
    dec_lstm_b: ValueId,
    out_w: ValueId,
    out_b: ValueId,
    post_lstm_w: ValueId,
    post_lstm_b: ValueId,
    post_out_w: ValueId,
    post_out_b: ValueId,
}

impl TapeParams {
    pub(crate) fn register<F: Scalar>(tape: &mut Tape<F>, params: &ModelParams<F>) -> Self {
        let mut ids = Vec::with_capacity(PARAM_NAMES.len());
        for (_, t) in params.tensors() {
            ids.push(tape.leaf(t.clone()));
        }
        TapeParams {
            embedding: ids[0],
            enc_fwd_w: ids[1],
            enc_fwd_b: ids[2],
            enc_bwd_w: ids[3],
            enc_bwd_b: ids[4],
            attn_lstm_w: ids[5],
            attn_lstm_b: ids[6],
            attn_proj_w: ids[7],
            attn_proj_b: ids[8],
            dec_lstm_w: ids[9],
            dec_lstm_b: ids[10],
            out_w: ids[11],
            out_b: ids[12],
            post_lstm_w: ids[13],
            post_lstm_b: ids[14],
            post_out_w: ids[15],
            post_out_b: ids[16],
        }
    }

    fn canonical(&self) -> Vec<ValueId> {
        vec![
            self.embedding,
            self.enc_fwd_w,
            self.enc_fwd_b,
            self.enc_bwd_w,
            self.enc_bwd_b,
            self.attn_lstm_w,
            self.attn_lstm_b,
            self.attn_proj_w,
            self.attn_proj_b,
            self.dec_lstm_w,
            self.dec_lstm_b,
            self.out_w,
            self.out_b,
            self.post_lstm_w,
            self.post_lstm_b,
            self.post_out_w,
            self.post_out_b,
        ]
    }
}

/// One LSTM step on the tape: combined kernel over `[x; h]`, gates
/// ordered input, forget, cell, output. Mirrors
/// [`crate::sparsity::lstm_step`] operation for operation.
pub(crate) fn tape_lstm<F: Scalar>(
    tape: &mut Tape<F>,
    w: ValueId,
    b: ValueId,
    x: ValueId,
    h: ValueId,
    c: ValueId,
    hidden: usize,
) -> Result<(ValueId, ValueId)> {
    let xh = tape.concat(&[x, h])?;
    let lin = tape.matvec(w, xh)?;
    let gates = tape.add(lin, b)?;
    let i_gate = tape.slice(gates, 0, hidden)?;
    let f_gate = tape.slice(gates, hidden, hidden)?;
    let g_gate = tape.slice(gates, 2 * hidden, hidden)?;
    let o_gate = tape.slice(gates, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i_gate)?;
    let f = tape.sigmoid(f_gate)?;
    let g = tape.tanh(g_gate)?;
    let o = tape.sigmoid(o_gate)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let ct = tape.tanh(c_new)?;
    let h_new = tape.mul(o, ct)?;
    Ok((h_new, c_new))
}

/// Bidirectional vanilla tanh encoder: returns `[J x encoder_dim]`.
pub(crate) fn encode_tape<F: Scalar>(
    tape: &mut Tape<F>,
    tp: &TapeParams,
    config: &ModelConfig,
    ids: &[usize],
) -> Result<ValueId> {
    let emb = tape.embedding(tp.embedding, ids)?;
    let j_len = ids.len();
    let he = config.enc_half();
    let zero_h = tape.constant(Tensor::zeros(vec![he]));

    let mut fwd = Vec::with_capacity(j_len);
    let mut h = zero_h;
    for j in 0..j_len {
        let x = tape.row(emb, j)?;
        let xh = tape.concat(&[x, h])?;
        let lin = tape.matvec(tp.enc_fwd_w, xh)?;
        let pre = tape.add(lin, tp.enc_fwd_b)?;
        h = tape.tanh(pre)?;
        fwd.push(h);
    }

    let mut bwd = vec![zero_h; j_len];
    let mut h = zero_h;
    for j in (0..j_len).rev() {
        let x = tape.row(emb, j)?;
        let xh = tape.concat(&[x, h])?;
        let lin = tape.matvec(tp.enc_bwd_w, xh)?;
        let pre = tape.add(lin, tp.enc_bwd_b)?;
        h = tape.tanh(pre)?;
        bwd[j] = h;
    }

    let rows: Vec<ValueId> = (0..j_len)
        .map(|j| tape.concat(&[fwd[j], bwd[j]]))
        .collect::<Result<_>>()?;
    tape.stack_rows(&rows)
}

fn validate_example<F: Scalar>(
    config: &ModelConfig,
    ids: &[usize],
    targets: &Tensor<F>,
) -> Result<()> {
    if ids.is_empty() {
        return Err(FeatherError::Input("utterance has no symbols".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&v| v >= config.vocab_size) {
        return Err(FeatherError::Input(format!(
            "symbol id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    if targets.shape().len() != 2 || targets.cols() != config.mel_bins {
        return Err(FeatherError::DimensionMismatch {
            op: "build_loss",
            lhs: targets.shape().to_vec(),
            rhs: vec![0, config.mel_bins],
        });
    }
    if targets.rows() <= config.postnet_delay {
        return Err(FeatherError::Input(format!(
            "utterance has {} frames but the post-net needs more than {}",
            targets.rows(),
            config.postnet_delay
        )));
    }
    Ok(())
}

/// Build the teacher-forced training graph for one utterance and return
/// the composite loss:
/// mean |y' - y| + mean |y''(delayed) - y| + lambda * |pos_T - (J + 1)|.
pub fn build_loss<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ModelParams<F>,
    config: &ModelConfig,
    ids: &[usize],
    targets: &Tensor<F>,
) -> Result<LossGraph> {
    config.validate()?;
    validate_example(config, ids, targets)?;

    let tp = TapeParams::register(tape, params);
    let enc = encode_tape(tape, &tp, config, ids)?;

    let j_len = ids.len();
    let t_frames = targets.rows();
    let m = config.mel_bins;
    let r = config.reduction;
    let fps = config.frames_per_step();
    let n_steps = t_frames.div_ceil(r);
    let delay = config.postnet_delay;

    // teacher inputs: target frames regrouped into steps, zero-padded to
    // n_steps * r frames
    let mut teacher: Vec<Tensor<F>> = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        let mut flat = vec![F::zero(); fps];
        for k in 0..r {
            let t = i * r + k;
            if t < t_frames {
                flat[k * m..(k + 1) * m].copy_from_slice(targets.row(t));
            }
        }
        teacher.push(Tensor::new(vec![fps], flat).expect("targets are finite"));
    }

    let attn_params = TapeAttentionParams {
        weight: tp.attn_proj_w,
        bias: tp.attn_proj_b,
    };
    let mut attn_state = initial_state_tape(tape, &config.attention)?;
    let zero_ctx = tape.constant(Tensor::zeros(vec![config.context_dim()]));
    let zero_frames = tape.constant(Tensor::zeros(vec![fps]));
    let (mut h_a, mut c_a) = {
        let z = tape.constant(Tensor::zeros(vec![config.attn_rnn_dim]));
        (z, z)
    };
    let (mut h_d, mut c_d) = {
        let z = tape.constant(Tensor::zeros(vec![config.decoder_rnn_dim]));
        (z, z)
    };
    let mut ctx = zero_ctx;
    let mut step_outputs = Vec::with_capacity(n_steps);
    let mut final_position = None;

    for i in 0..n_steps {
        let y_prev = if i == 0 {
            zero_frames
        } else {
            tape.constant(teacher[i - 1].clone())
        };
        let x_a = tape.concat(&[ctx, y_prev])?;
        let (ha, ca) = tape_lstm(
            tape,
            tp.attn_lstm_w,
            tp.attn_lstm_b,
            x_a,
            h_a,
            c_a,
            config.attn_rnn_dim,
        )?;
        h_a = ha;
        c_a = ca;

        let att = attend_tape(tape, &attn_params, &config.attention, &attn_state, h_a, j_len)?;
        attn_state = att.state;
        ctx = tape.vecmat(att.alpha, enc)?;

        let x_d = tape.concat(&[ctx, h_a])?;
        let (hd, cd) = tape_lstm(
            tape,
            tp.dec_lstm_w,
            tp.dec_lstm_b,
            x_d,
            h_d,
            c_d,
            config.decoder_rnn_dim,
        )?;
        h_d = hd;
        c_d = cd;

        let lin = tape.matvec(tp.out_w, h_d)?;
        let y = tape.add(lin, tp.out_b)?;
        step_outputs.push(y);
        final_position = Some(att.position);
    }

    // per-frame views of the coarse prediction
    let mut frames = Vec::with_capacity(t_frames);
    for t in 0..t_frames {
        frames.push(tape.slice(step_outputs[t / r], (t % r) * m, m)?);
    }

    let pred_pre = tape.concat(&frames)?;
    let tgt_pre = tape.constant(Tensor::new(
        vec![t_frames * m],
        targets.data().to_vec(),
    )?);
    let l1_pre = tape.l1_mean(pred_pre, tgt_pre)?;

    // post-net: frame-level LSTM over y', each output delayed `delay`
    // frames and refined with a residual from the aligned coarse frame
    let (mut h_p, mut c_p) = {
        let z = tape.constant(Tensor::zeros(vec![config.postnet_dim]));
        (z, z)
    };
    let mut post = Vec::with_capacity(t_frames);
    for (t, &frame) in frames.iter().enumerate() {
        let (hp, cp) = tape_lstm(
            tape,
            tp.post_lstm_w,
            tp.post_lstm_b,
            frame,
            h_p,
            c_p,
            config.postnet_dim,
        )?;
        h_p = hp;
        c_p = cp;
        let lin = tape.matvec(tp.post_out_w, h_p)?;
        let mut y2 = tape.add(lin, tp.post_out_b)?;
        if t >= delay {
            y2 = tape.add(y2, frames[t - delay])?;
        }
        post.push(y2);
    }
    let pred_post = tape.concat(&post[delay..t_frames])?;
    let tgt_post = tape.constant(Tensor::new(
        vec![(t_frames - delay) * m],
        targets.data()[..(t_frames - delay) * m].to_vec(),
    )?);
    let l1_post = tape.l1_mean(pred_post, tgt_post)?;

    // stop objective: pull the final attention position to J + 1
    let final_position = final_position.expect("at least one decode step");
    let jp1 = tape.scalar_const(F::from_f64c((j_len + 1) as f64));
    let diff = tape.sub(final_position, jp1)?;
    let stop = tape.abs(diff)?;
    let stop_scaled = tape.scale(stop, F::from_f64c(config.stop_lambda))?;

    let pre_post = tape.add(l1_pre, l1_post)?;
    let total = tape.add(pre_post, stop_scaled)?;

    Ok(LossGraph {
        total,
        l1_pre,
        l1_post,
        stop,
        final_position,
        step_outputs,
        leaves: tp.canonical(),
    })
}

fn read_breakdown<F: Scalar>(tape: &Tape<F>, graph: &LossGraph) -> LossBreakdown {
    let read = |id: ValueId| tape.value(id).data()[0].to_f64c();
    LossBreakdown {
        total: read(graph.total),
        l1_pre: read(graph.l1_pre),
        l1_post: read(graph.l1_post),
        stop: read(graph.stop),
        final_position: read(graph.final_position),
    }
}

/// Teacher-forced loss of one utterance without touching the weights.
pub fn eval_loss<F: Scalar>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    example: &TrainExample<F>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let graph = build_loss(&mut tape, params, config, &example.ids, &example.mel)?;
    Ok(read_breakdown(&tape, &graph))
}

/// Pruning options for training: which kernels participate and the
/// schedule that drives mask growth.
#[derive(Debug, Clone, Copy)]
pub struct PruneOptions {
    pub schedule: PruneSchedule,
    pub block_rows: usize,
    pub block_cols: usize,
    pub prune_attn: bool,
    pub prune_dec: bool,
}

impl PruneOptions {
    pub fn new(schedule: PruneSchedule) -> Self {
        PruneOptions {
            schedule,
            block_rows: 16,
            block_cols: 1,
            prune_attn: true,
            prune_dec: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.block_rows == 0 || self.block_cols == 0 {
            return Err(FeatherError::Config("block shape must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    /// Heavy-ball momentum; 0 is plain gradient descent.
    pub momentum: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub log_every: usize,
    pub prune: Option<PruneOptions>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 200,
            lr: 0.05,
            momentum: 0.0,
            clip_norm: 1.0,
            log_every: 50,
            prune: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(FeatherError::Config("training needs at least one step".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(FeatherError::Config(format!("bad learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FeatherError::Config(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(FeatherError::Config(format!(
                "bad clip norm {}",
                self.clip_norm
            )));
        }
        if self.log_every == 0 {
            return Err(FeatherError::Config("log_every must be positive".into()));
        }
        if let Some(p) = &self.prune {
            p.validate()?;
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy)]
pub struct MetricsRow {
    pub step: usize,
    pub total: f64,
    pub l1_pre: f64,
    pub l1_post: f64,
    pub stop: f64,
    /// Attention mean at the last teacher-forced step of this step's
    /// example (steps use single examples, so the batch mean is the
    /// value itself). Written as the `mean_mu_T` CSV column.
    pub final_position: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Render logged metrics as CSV.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,total_loss,l1_pre,l1_post,stop_loss,mean_mu_T\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.step, r.total, r.l1_pre, r.l1_post, r.stop, r.final_position
        ));
    }
    out
}

fn grow_mask<F: Scalar>(
    weights: &mut Tensor<F>,
    mask: &mut Option<BlockMask>,
    target: f64,
    block_rows: usize,
    block_cols: usize,
) -> Result<()> {
    let current = match mask.take() {
        Some(m) => m,
        None => BlockMask::full(weights.rows(), weights.cols(), block_rows, block_cols)?,
    };
    let grown = prune_to(weights, &current, target)?;
    grown.apply(weights)?;
    *mask = Some(grown);
    Ok(())
}

/// Plain-SGD training over a round-robin of `examples`. Returns logged
/// metrics; `params` and `masks` are updated in place.
pub fn train_toy<F: Scalar>(
    params: &mut ModelParams<F>,
    masks: &mut ModelMasks,
    config: &ModelConfig,
    examples: &[TrainExample<F>],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    config.validate()?;
    opts.validate()?;
    if examples.is_empty() {
        return Err(FeatherError::Input("no training utterances".into()));
    }
    for ex in examples {
        validate_example(config, &ex.ids, &ex.mel)?;
    }

    let idx_attn_w = PARAM_NAMES.iter().position(|n| *n == "attn_lstm_w").unwrap();
    let idx_dec_w = PARAM_NAMES.iter().position(|n| *n == "dec_lstm_w").unwrap();

    let mut velocity: Vec<Vec<F>> = params
        .tensors()
        .iter()
        .map(|(_, t)| vec![F::zero(); t.numel()])
        .collect();
    let mut rows = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;

    for step in 0..opts.steps {
        if let Some(p) = &opts.prune {
            if p.schedule.is_prune_step(step) {
                let target = p.schedule.sparsity_at(step);
                if p.prune_attn {
                    grow_mask(
                        &mut params.attn_lstm_w,
                        &mut masks.attn_lstm,
                        target,
                        p.block_rows,
                        p.block_cols,
                    )?;
                }
                if p.prune_dec {
                    grow_mask(
                        &mut params.dec_lstm_w,
                        &mut masks.dec_lstm,
                        target,
                        p.block_rows,
                        p.block_cols,
                    )?;
                }
            }
        }

        let ex = &examples[step % examples.len()];
        let mut tape = Tape::new();
        let graph = match build_loss(&mut tape, params, config, &ex.ids, &ex.mel) {
            Ok(g) => g,
            Err(FeatherError::NonFinite { op }) => {
                return Err(FeatherError::Diverged {
                    step,
                    detail: format!("non-finite value in `{op}`"),
                })
            }
            Err(e) => return Err(e),
        };
        let breakdown = read_breakdown(&tape, &graph);
        if !breakdown.total.is_finite() {
            return Err(FeatherError::Diverged {
                step,
                detail: format!("loss became {}", breakdown.total),
            });
        }
        if step == 0 {
            initial_loss = breakdown.total;
        }
        final_loss = breakdown.total;

        let grads = tape.backward(graph.total)?;
        let mut gvecs: Vec<Vec<F>> = graph
            .leaves
            .iter()
            .map(|&id| match grads.get(id) {
                Some(g) => g.to_vec(),
                None => vec![F::zero(); tape.value(id).numel()],
            })
            .collect();

        // gradients of pruned blocks are discarded so masked weights
        // never drift from zero
        if let Some(m) = &masks.attn_lstm {
            m.apply_to_slice(&mut gvecs[idx_attn_w])?;
        }
        if let Some(m) = &masks.dec_lstm {
            m.apply_to_slice(&mut gvecs[idx_dec_w])?;
        }

        let mut sq = 0.0f64;
        for g in &gvecs {
            for v in g {
                let x = v.to_f64c();
                sq += x * x;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(FeatherError::Diverged {
                step,
                detail: "gradient norm is not finite".into(),
            });
        }
        let scale = if norm > opts.clip_norm {
            opts.clip_norm / norm
        } else {
            1.0
        };
        let lr = F::from_f64c(opts.lr);
        let scale = F::from_f64c(scale);
        let mom = F::from_f64c(opts.momentum);
        for (((_, t), g), vel) in params
            .tensors_mut()
            .into_iter()
            .zip(gvecs.iter())
            .zip(velocity.iter_mut())
        {
            for ((w, gv), v) in t.data_mut().iter_mut().zip(g.iter()).zip(vel.iter_mut()) {
                *v = mom * *v + scale * *gv;
                *w = *w - lr * *v;
            }
        }
        masks.apply(params)?;

        if step % opts.log_every == 0 || step + 1 == opts.steps {
            rows.push(MetricsRow {
                step,
                total: breakdown.total,
                l1_pre: breakdown.l1_pre,
                l1_post: breakdown.l1_post,
                stop: breakdown.stop,
                final_position: breakdown.final_position,
            });
        }
    }

    Ok(TrainReport {
        rows,
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::sparsity::Curve;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            embed_dim: 8,
            encoder_dim: 8,
            attn_rnn_dim: 16,
            decoder_rnn_dim: 16,
            mel_bins: 4,
            reduction: 2,
            postnet_dim: 8,
            postnet_delay: 2,
            stop_lambda: 1e-3,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn synthetic_examples<F: Scalar>(
        config: &ModelConfig,
        n: usize,
        seed: u64,
    ) -> Vec<TrainExample<F>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let j = rng.gen_range(2..5usize);
                let ids: Vec<usize> =
                    (0..j).map(|_| rng.gen_range(0..config.vocab_size)).collect();
                let t = j * 3;
                let data: Vec<f64> = (0..t * config.mel_bins)
                    .map(|_| rng.gen_range(0.0..1.0))
                    .collect();
                TrainExample {
                    ids,
                    mel: Tensor::from_f64_slice(vec![t, config.mel_bins], &data).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn loss_composition_is_exact() {
        let config = tiny_config();
        let params = ModelParams::<f64>::init(&config, 3).unwrap();
        let ex = &synthetic_examples::<f64>(&config, 1, 5)[0];
        let b = eval_loss(&params, &config, ex).unwrap();
        assert!(b.total.is_finite() && b.l1_pre > 0.0 && b.l1_post > 0.0);
        let composed = b.l1_pre + b.l1_post + config.stop_lambda * b.stop;
        assert!((b.total - composed).abs() < 1e-12);
        assert!(b.final_position > 0.0);
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        let config = tiny_config();
        let params = ModelParams::<f64>::init(&config, 4).unwrap();
        let ex = &synthetic_examples::<f64>(&config, 1, 6)[0];
        let mut tape = Tape::new();
        let graph = build_loss(&mut tape, &params, &config, &ex.ids, &ex.mel).unwrap();
        let grads = tape.backward(graph.total).unwrap();
        for (name, id) in PARAM_NAMES.iter().zip(graph.leaves.iter()) {
            let g = grads.get(*id).unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(
                g.iter().any(|v| *v != 0.0),
                "gradient for {name} is identically zero"
            );
        }
    }

    #[test]
    fn training_reduces_loss() {
        let config = tiny_config();
        let mut params = ModelParams::<f64>::init(&config, 11).unwrap();
        let mut masks = ModelMasks::default();
        let examples = synthetic_examples::<f64>(&config, 2, 12);
        let opts = TrainOptions {
            steps: 60,
            lr: 0.1,
            log_every: 10,
            ..TrainOptions::default()
        };
        let report = train_toy(&mut params, &mut masks, &config, &examples, &opts).unwrap();
        assert!(report.final_loss < report.initial_loss);
        assert!(masks.is_dense());
        assert_eq!(report.rows.first().unwrap().step, 0);
        assert_eq!(report.rows.last().unwrap().step, 59);
    }

    #[test]
    fn pruned_training_zeroes_blocks_and_hits_target() {
        let config = tiny_config();
        let mut params = ModelParams::<f64>::init(&config, 21).unwrap();
        let mut masks = ModelMasks::default();
        let examples = synthetic_examples::<f64>(&config, 2, 22);
        let schedule = PruneSchedule {
            target_sparsity: 0.5,
            start_step: 2,
            interval: 4,
            end_step: 18,
            curve: Curve::Cubic,
        };
        let opts = TrainOptions {
            steps: 30,
            lr: 0.05,
            prune: Some(PruneOptions::new(schedule)),
            ..TrainOptions::default()
        };
        train_toy(&mut params, &mut masks, &config, &examples, &opts).unwrap();

        for (mask, w) in [
            (masks.attn_lstm.as_ref().unwrap(), &params.attn_lstm_w),
            (masks.dec_lstm.as_ref().unwrap(), &params.dec_lstm_w),
        ] {
            let n = mask.n_blocks();
            let want = (0.5 * n as f64).ceil() as usize;
            assert_eq!(n - mask.kept_count(), want);
            // pruned rows are exactly zero
            let mut cleared = w.clone();
            mask.apply(&mut cleared).unwrap();
            assert!(cleared.bits_eq(w), "masked weights drifted from zero");
        }
    }

    #[test]
    fn prune_layer_opt_out_is_respected() {
        let config = tiny_config();
        let mut params = ModelParams::<f64>::init(&config, 31).unwrap();
        let mut masks = ModelMasks::default();
        let examples = synthetic_examples::<f64>(&config, 1, 32);
        let schedule = PruneSchedule {
            target_sparsity: 0.5,
            start_step: 0,
            interval: 2,
            end_step: 8,
            curve: Curve::Linear,
        };
        let opts = TrainOptions {
            steps: 10,
            lr: 0.05,
            prune: Some(PruneOptions {
                prune_attn: false,
                ..PruneOptions::new(schedule)
            }),
            ..TrainOptions::default()
        };
        train_toy(&mut params, &mut masks, &config, &examples, &opts).unwrap();
        assert!(masks.attn_lstm.is_none());
        assert!(masks.dec_lstm.is_some());
    }

    #[test]
    fn runaway_learning_rate_reports_divergence() {
        let config = tiny_config();
        let mut params = ModelParams::<f32>::init(&config, 41).unwrap();
        let mut masks = ModelMasks::default();
        let examples = synthetic_examples::<f32>(&config, 1, 42);
        // L1 losses and saturating gates keep gradients bounded, so a
        // mild lr only inflates the loss; an enormous one overflows the
        // f32 loss sum on the next forward pass.
        let opts = TrainOptions {
            steps: 5,
            lr: 1e38,
            clip_norm: 1e38,
            ..TrainOptions::default()
        };
        match train_toy(&mut params, &mut masks, &config, &examples, &opts) {
            Err(e) => assert_eq!(e.class(), "numeric"),
            Ok(report) => panic!(
                "expected divergence, got final loss {}",
                report.final_loss
            ),
        }
    }

    #[test]
    fn bad_examples_are_rejected_up_front() {
        let config = tiny_config();
        let mut params = ModelParams::<f64>::init(&config, 51).unwrap();
        let mut masks = ModelMasks::default();
        let opts = TrainOptions::default();
        // empty ids
        let bad = vec![TrainExample {
            ids: vec![],
            mel: Tensor::<f64>::zeros(vec![8, config.mel_bins]),
        }];
        let err = train_toy(&mut params, &mut masks, &config, &bad, &opts).unwrap_err();
        assert_eq!(err.class(), "config");
        // too few frames for the post-net delay
        let bad = vec![TrainExample {
            ids: vec![1, 2],
            mel: Tensor::<f64>::zeros(vec![config.postnet_delay, config.mel_bins]),
        }];
        let err = train_toy(&mut params, &mut masks, &config, &bad, &opts).unwrap_err();
        assert_eq!(err.class(), "config");
    }

    #[test]
    fn metrics_csv_shape() {
        let rows = vec![MetricsRow {
            step: 0,
            total: 1.25,
            l1_pre: 1.0,
            l1_post: 0.25,
            stop: 3.0,
            final_position: 2.5,
        }];
        let csv = metrics_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,total_loss,l1_pre,l1_post,stop_loss,mean_mu_T"
        );
        assert_eq!(lines.next().unwrap(), "0,1.250000,1.000000,0.250000,3.000000,2.500000");
    }
}
