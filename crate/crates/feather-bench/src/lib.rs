//! Shared builders for the criterion benchmarks: seeded random kernels,
//! pruned masks, and model pairs that differ only in kernel storage.

use feather_core::model::{ModelConfig, ModelMasks, ModelParams};
use feather_core::sparsity::{prune_to, BlockMask, BlockSparseMatrix};
use feather_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded dense matrix with entries in (-1, 1).
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(vec![rows, cols]);
    for v in t.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    t
}

/// Seeded input vector.
pub fn random_vec(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Prune `weights` to `sparsity` with 16x1 blocks and return the
/// compacted matrix together with its zero-applied dense twin.
pub fn sparse_pair(
    weights: &Tensor<f32>,
    sparsity: f64,
) -> (BlockSparseMatrix<f32>, Tensor<f32>) {
    let full = BlockMask::full(weights.rows(), weights.cols(), 16, 1).expect("block shape fits");
    let mask = prune_to(weights, &full, sparsity).expect("prunable");
    let sparse = BlockSparseMatrix::from_dense(weights, &mask).expect("masked build");
    let mut dense = weights.clone();
    mask.apply(&mut dense).expect("mask applies");
    (sparse, dense)
}

/// Decoder-heavy architecture used by the decode benchmark.
pub fn bench_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        embed_dim: 32,
        encoder_dim: 64,
        attn_rnn_dim: 256,
        decoder_rnn_dim: 256,
        mel_bins: 20,
        reduction: 2,
        postnet_dim: 32,
        postnet_delay: 5,
        ..ModelConfig::default()
    }
}

/// A random model plus masks pruning both recurrent kernels to
/// `sparsity`; the dense twin keeps the exact same (masked) weights.
pub fn model_pair(sparsity: f64) -> (ModelParams<f32>, ModelMasks, ModelConfig) {
    let config = bench_config();
    let mut params = ModelParams::init(&config, 7).expect("valid config");
    let fa = BlockMask::full(
        params.attn_lstm_w.rows(),
        params.attn_lstm_w.cols(),
        16,
        1,
    )
    .unwrap();
    let fd = BlockMask::full(params.dec_lstm_w.rows(), params.dec_lstm_w.cols(), 16, 1).unwrap();
    let masks = ModelMasks {
        attn_lstm: Some(prune_to(&params.attn_lstm_w, &fa, sparsity).unwrap()),
        dec_lstm: Some(prune_to(&params.dec_lstm_w, &fd, sparsity).unwrap()),
    };
    masks.apply(&mut params).expect("masks fit the kernels");
    (params, masks, config)
}
