//! The sequence-to-spectrogram model: configuration, parameters, the
//! differentiable training pass and the plain inference decoder.
//!
//! Data flow: symbol ids -> embedding -> bidirectional tanh RNN encoder
//! -> autoregressive decoder (attention LSTM + alignment mechanism +
//! decoder LSTM + linear head emitting `reduction` frames per step) ->
//! frame-level post-net LSTM that re-predicts each frame with a fixed
//! lookahead of `postnet_delay` frames.

mod infer;
mod train;

#[cfg(test)]
pub(crate) use train::tests as testkit;

pub(crate) use infer::{affine, encode_plain};
pub use infer::{infer, DecodeTrace, InferOptions, InferOutput};
pub use train::{
    build_loss, eval_loss, metrics_to_csv, train_toy, LossBreakdown, LossGraph, MetricsRow,
    PruneOptions, TrainExample, TrainOptions, TrainReport,
};

use crate::attention::AttentionConfig;
use crate::error::{FeatherError, Result};
use crate::scalar::Scalar;
use crate::sparsity::BlockMask;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Everything needed to build or rebuild a model. Serializes into the
/// bundle manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Total encoder output width; each direction gets half.
    pub encoder_dim: usize,
    pub attn_rnn_dim: usize,
    pub decoder_rnn_dim: usize,
    pub mel_bins: usize,
    /// Frames emitted per decode step.
    pub reduction: usize,
    pub postnet_dim: usize,
    /// Post-net lookahead in frames.
    pub postnet_delay: usize,
    /// Weight of the stop objective in the composite loss.
    pub stop_lambda: f64,
    pub attention: AttentionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 16,
            embed_dim: 32,
            encoder_dim: 32,
            attn_rnn_dim: 64,
            decoder_rnn_dim: 64,
            mel_bins: 20,
            reduction: 2,
            postnet_dim: 256,
            postnet_delay: 5,
            stop_lambda: 1e-3,
            attention: AttentionConfig::gaussian(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("encoder_dim", self.encoder_dim),
            ("attn_rnn_dim", self.attn_rnn_dim),
            ("decoder_rnn_dim", self.decoder_rnn_dim),
            ("mel_bins", self.mel_bins),
            ("reduction", self.reduction),
            ("postnet_dim", self.postnet_dim),
            ("postnet_delay", self.postnet_delay),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(FeatherError::Config(format!("{name} must be positive")));
            }
        }
        if self.encoder_dim % 2 != 0 {
            return Err(FeatherError::Config(
                "encoder_dim must be even (it splits across two directions)".into(),
            ));
        }
        if !self.stop_lambda.is_finite() || self.stop_lambda < 0.0 {
            return Err(FeatherError::Config("stop_lambda must be non-negative".into()));
        }
        self.attention.validate()
    }

    /// Encoder width per direction.
    pub fn enc_half(&self) -> usize {
        self.encoder_dim / 2
    }
    /// Context vector width (= encoder output width).
    pub fn context_dim(&self) -> usize {
        self.encoder_dim
    }
    /// Flattened frames emitted per decode step.
    pub fn frames_per_step(&self) -> usize {
        self.mel_bins * self.reduction
    }
    /// Attention-LSTM input width: previous context + previous frames.
    pub fn attn_input_dim(&self) -> usize {
        self.context_dim() + self.frames_per_step()
    }
    /// Decoder-LSTM input width: context + attention-LSTM state.
    pub fn dec_input_dim(&self) -> usize {
        self.context_dim() + self.attn_rnn_dim
    }

    /// Expected shape of every trainable tensor, canonical order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let he = self.enc_half();
        let (e, a, d) = (self.embed_dim, self.attn_rnn_dim, self.decoder_rnn_dim);
        let fps = self.frames_per_step();
        let p = self.attention.intermediate_dim();
        let pn = self.postnet_dim;
        let m = self.mel_bins;
        vec![
            ("embedding", vec![self.vocab_size, e]),
            ("enc_fwd_w", vec![he, e + he]),
            ("enc_fwd_b", vec![he]),
            ("enc_bwd_w", vec![he, e + he]),
            ("enc_bwd_b", vec![he]),
            ("attn_lstm_w", vec![4 * a, self.attn_input_dim() + a]),
            ("attn_lstm_b", vec![4 * a]),
            ("attn_proj_w", vec![p, a]),
            ("attn_proj_b", vec![p]),
            ("dec_lstm_w", vec![4 * d, self.dec_input_dim() + d]),
            ("dec_lstm_b", vec![4 * d]),
            ("out_w", vec![fps, d]),
            ("out_b", vec![fps]),
            ("post_lstm_w", vec![4 * pn, m + pn]),
            ("post_lstm_b", vec![4 * pn]),
            ("post_out_w", vec![m, pn]),
            ("post_out_b", vec![m]),
        ]
    }
}

/// Names of every trainable tensor, in canonical (storage) order.
pub const PARAM_NAMES: [&str; 17] = [
    "embedding",
    "enc_fwd_w",
    "enc_fwd_b",
    "enc_bwd_w",
    "enc_bwd_b",
    "attn_lstm_w",
    "attn_lstm_b",
    "attn_proj_w",
    "attn_proj_b",
    "dec_lstm_w",
    "dec_lstm_b",
    "out_w",
    "out_b",
    "post_lstm_w",
    "post_lstm_b",
    "post_out_w",
    "post_out_b",
];

/// All trainable tensors. LSTM kernels are combined `[4H x (I + H)]`
/// matrices over `[x; h]` with gate rows ordered input, forget, cell,
/// output; every weight matrix is `[out x in]`.
#[derive(Debug, Clone)]
pub struct ModelParams<F: Scalar> {
    pub embedding: Tensor<F>,
    pub enc_fwd_w: Tensor<F>,
    pub enc_fwd_b: Tensor<F>,
    pub enc_bwd_w: Tensor<F>,
    pub enc_bwd_b: Tensor<F>,
    pub attn_lstm_w: Tensor<F>,
    pub attn_lstm_b: Tensor<F>,
    pub attn_proj_w: Tensor<F>,
    pub attn_proj_b: Tensor<F>,
    pub dec_lstm_w: Tensor<F>,
    pub dec_lstm_b: Tensor<F>,
    pub out_w: Tensor<F>,
    pub out_b: Tensor<F>,
    pub post_lstm_w: Tensor<F>,
    pub post_lstm_b: Tensor<F>,
    pub post_out_w: Tensor<F>,
    pub post_out_b: Tensor<F>,
}

/// LSTM bias with the forget gate started at 1 so fresh cells retain
/// state, everything else at zero.
fn lstm_bias<F: Scalar>(hidden: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); 4 * hidden];
    for v in data.iter_mut().skip(hidden).take(hidden) {
        *v = F::one();
    }
    Tensor::new(vec![4 * hidden], data).expect("bias is finite")
}

impl<F: Scalar> ModelParams<F> {
    /// Seeded uniform init (plus-minus sqrt(1/fan_in)); the same seed
    /// always yields the same parameters.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = config.enc_half();
        let (e, a, d) = (config.embed_dim, config.attn_rnn_dim, config.decoder_rnn_dim);
        let fps = config.frames_per_step();
        let p = config.attention.intermediate_dim();
        let pn = config.postnet_dim;
        let m = config.mel_bins;

        let enc_in = e + he;
        let attn_in = config.attn_input_dim() + a;
        let dec_in = config.dec_input_dim() + d;
        let post_in = m + pn;

        Ok(ModelParams {
            embedding: Tensor::init_uniform(vec![config.vocab_size, e], e, &mut rng),
            enc_fwd_w: Tensor::init_uniform(vec![he, enc_in], enc_in, &mut rng),
            enc_fwd_b: Tensor::zeros(vec![he]),
            enc_bwd_w: Tensor::init_uniform(vec![he, enc_in], enc_in, &mut rng),
            enc_bwd_b: Tensor::zeros(vec![he]),
            attn_lstm_w: Tensor::init_uniform(vec![4 * a, attn_in], attn_in, &mut rng),
            attn_lstm_b: lstm_bias(a),
            attn_proj_w: Tensor::init_uniform(vec![p, a], a, &mut rng),
            attn_proj_b: Tensor::zeros(vec![p]),
            dec_lstm_w: Tensor::init_uniform(vec![4 * d, dec_in], dec_in, &mut rng),
            dec_lstm_b: lstm_bias(d),
            out_w: Tensor::init_uniform(vec![fps, d], d, &mut rng),
            out_b: Tensor::zeros(vec![fps]),
            post_lstm_w: Tensor::init_uniform(vec![4 * pn, post_in], post_in, &mut rng),
            post_lstm_b: lstm_bias(pn),
            post_out_w: Tensor::init_uniform(vec![m, pn], pn, &mut rng),
            post_out_b: Tensor::zeros(vec![m]),
        })
    }

    /// Tensors in canonical order, paired with their names.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<F>)> {
        vec![
            ("embedding", &self.embedding),
            ("enc_fwd_w", &self.enc_fwd_w),
            ("enc_fwd_b", &self.enc_fwd_b),
            ("enc_bwd_w", &self.enc_bwd_w),
            ("enc_bwd_b", &self.enc_bwd_b),
            ("attn_lstm_w", &self.attn_lstm_w),
            ("attn_lstm_b", &self.attn_lstm_b),
            ("attn_proj_w", &self.attn_proj_w),
            ("attn_proj_b", &self.attn_proj_b),
            ("dec_lstm_w", &self.dec_lstm_w),
            ("dec_lstm_b", &self.dec_lstm_b),
            ("out_w", &self.out_w),
            ("out_b", &self.out_b),
            ("post_lstm_w", &self.post_lstm_w),
            ("post_lstm_b", &self.post_lstm_b),
            ("post_out_w", &self.post_out_w),
            ("post_out_b", &self.post_out_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<F>)> {
        vec![
            ("embedding", &mut self.embedding),
            ("enc_fwd_w", &mut self.enc_fwd_w),
            ("enc_fwd_b", &mut self.enc_fwd_b),
            ("enc_bwd_w", &mut self.enc_bwd_w),
            ("enc_bwd_b", &mut self.enc_bwd_b),
            ("attn_lstm_w", &mut self.attn_lstm_w),
            ("attn_lstm_b", &mut self.attn_lstm_b),
            ("attn_proj_w", &mut self.attn_proj_w),
            ("attn_proj_b", &mut self.attn_proj_b),
            ("dec_lstm_w", &mut self.dec_lstm_w),
            ("dec_lstm_b", &mut self.dec_lstm_b),
            ("out_w", &mut self.out_w),
            ("out_b", &mut self.out_b),
            ("post_lstm_w", &mut self.post_lstm_w),
            ("post_lstm_b", &mut self.post_lstm_b),
            ("post_out_w", &mut self.post_out_w),
            ("post_out_b", &mut self.post_out_b),
        ]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            embedding: self.embedding.cast(),
            enc_fwd_w: self.enc_fwd_w.cast(),
            enc_fwd_b: self.enc_fwd_b.cast(),
            enc_bwd_w: self.enc_bwd_w.cast(),
            enc_bwd_b: self.enc_bwd_b.cast(),
            attn_lstm_w: self.attn_lstm_w.cast(),
            attn_lstm_b: self.attn_lstm_b.cast(),
            attn_proj_w: self.attn_proj_w.cast(),
            attn_proj_b: self.attn_proj_b.cast(),
            dec_lstm_w: self.dec_lstm_w.cast(),
            dec_lstm_b: self.dec_lstm_b.cast(),
            out_w: self.out_w.cast(),
            out_b: self.out_b.cast(),
            post_lstm_w: self.post_lstm_w.cast(),
            post_lstm_b: self.post_lstm_b.cast(),
            post_out_w: self.post_out_w.cast(),
            post_out_b: self.post_out_b.cast(),
        }
    }
}

/// Prune masks for the two recurrent decoder kernels. `None` means the
/// kernel is dense (never pruned or pruning opted out).
#[derive(Debug, Clone, Default)]
pub struct ModelMasks {
    pub attn_lstm: Option<BlockMask>,
    pub dec_lstm: Option<BlockMask>,
}

impl ModelMasks {
    pub fn is_dense(&self) -> bool {
        self.attn_lstm.is_none() && self.dec_lstm.is_none()
    }

    /// Zero pruned blocks in the corresponding kernels.
    pub fn apply<F: Scalar>(&self, params: &mut ModelParams<F>) -> Result<()> {
        if let Some(m) = &self.attn_lstm {
            m.apply(&mut params.attn_lstm_w)?;
        }
        if let Some(m) = &self.dec_lstm {
            m.apply(&mut params.dec_lstm_w)?;
        }
        Ok(())
    }
}
