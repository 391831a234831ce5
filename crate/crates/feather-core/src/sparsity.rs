//! Block-structured magnitude pruning and sparse kernels.
//!
//! Weight matrices are divided into fixed-shape blocks (16x1 by
//! default: 16 output rows, 1 input column). A [`BlockMask`] records
//! which blocks survive; pruning ranks blocks by mean absolute weight
//! and zeroes the weakest, and a mask can only lose blocks over time.
//! [`BlockSparseMatrix`] stores the surviving blocks and performs the
//! matrix-vector products the sparse decoder runs at inference time.

use crate::error::{FeatherError, Result};
use crate::scalar::{self, Scalar};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Shape of the sparsity ramp between the first and last prune event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Curve {
    /// `S * (1 - (1 - f)^3)`: fast early pruning that flattens out.
    Cubic,
    /// `S * f`.
    Linear,
}

impl std::str::FromStr for Curve {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cubic" => Ok(Curve::Cubic),
            "linear" => Ok(Curve::Linear),
            other => Err(format!("unknown curve `{other}` (expected cubic or linear)")),
        }
    }
}

/// Gradual pruning schedule: no pruning before `start_step`, events
/// every `interval` steps, final sparsity reached at `end_step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub target_sparsity: f64,
    pub start_step: usize,
    pub interval: usize,
    pub end_step: usize,
    pub curve: Curve,
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return Err(FeatherError::Config(format!(
                "target sparsity must be in [0, 1), got {}",
                self.target_sparsity
            )));
        }
        if self.end_step <= self.start_step {
            return Err(FeatherError::Config(format!(
                "prune end step {} must come after start step {}",
                self.end_step, self.start_step
            )));
        }
        if self.interval == 0 {
            return Err(FeatherError::Config("prune interval must be positive".into()));
        }
        Ok(())
    }

    /// Target sparsity in effect at `step`. The value is quantized to
    /// prune events: it changes only at `start_step + n * interval` and
    /// holds between events.
    pub fn sparsity_at(&self, step: usize) -> f64 {
        if step < self.start_step {
            return 0.0;
        }
        let n = (step - self.start_step) / self.interval;
        let event = self.start_step + n * self.interval;
        let span = (self.end_step - self.start_step) as f64;
        let f = (((event - self.start_step) as f64) / span).min(1.0);
        match self.curve {
            Curve::Cubic => self.target_sparsity * (1.0 - (1.0 - f).powi(3)),
            Curve::Linear => self.target_sparsity * f,
        }
    }

    /// Whether `step` lands exactly on a prune event.
    pub fn is_prune_step(&self, step: usize) -> bool {
        step >= self.start_step
            && step <= self.end_step
            && (step - self.start_step) % self.interval == 0
    }
}

/// Which blocks of a matrix survive, in block-row-major order with one
/// bit per block (LSB first; a set bit means the block is kept).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    rows: usize,
    cols: usize,
    block_rows: usize,
    block_cols: usize,
    bits: Vec<u64>,
}

impl BlockMask {
    /// All-kept mask. The block shape must tile the matrix exactly.
    pub fn full(rows: usize, cols: usize, block_rows: usize, block_cols: usize) -> Result<Self> {
        if block_rows == 0 || block_cols == 0 {
            return Err(FeatherError::Contract("block shape must be non-empty".into()));
        }
        if rows % block_rows != 0 || cols % block_cols != 0 {
            return Err(FeatherError::Contract(format!(
                "block shape {block_rows}x{block_cols} does not tile a {rows}x{cols} matrix"
            )));
        }
        let n = (rows / block_rows) * (cols / block_cols);
        let mut bits = vec![u64::MAX; n.div_ceil(64)];
        // clear padding bits past the final block
        if n % 64 != 0 {
            if let Some(last) = bits.last_mut() {
                *last = (1u64 << (n % 64)) - 1;
            }
        }
        Ok(BlockMask {
            rows,
            cols,
            block_rows,
            block_cols,
            bits,
        })
    }

    /// Rebuild a mask from stored words, validating the bit count.
    pub fn from_raw(
        rows: usize,
        cols: usize,
        block_rows: usize,
        block_cols: usize,
        bits: Vec<u64>,
    ) -> Result<Self> {
        let proto = BlockMask::full(rows, cols, block_rows, block_cols)?;
        if bits.len() != proto.bits.len() {
            return Err(FeatherError::Format(format!(
                "mask has {} words, expected {}",
                bits.len(),
                proto.bits.len()
            )));
        }
        let n = proto.n_blocks();
        if n % 64 != 0 && bits.last().map_or(false, |w| w >> (n % 64) != 0) {
            return Err(FeatherError::Format("mask has padding bits set".into()));
        }
        Ok(BlockMask { bits, ..proto })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn block_shape(&self) -> (usize, usize) {
        (self.block_rows, self.block_cols)
    }
    /// Grid dimensions in blocks.
    pub fn grid(&self) -> (usize, usize) {
        (self.rows / self.block_rows, self.cols / self.block_cols)
    }
    pub fn n_blocks(&self) -> usize {
        let (gr, gc) = self.grid();
        gr * gc
    }
    pub fn words(&self) -> &[u64] {
        &self.bits
    }

    pub fn is_kept(&self, block: usize) -> bool {
        self.bits[block / 64] >> (block % 64) & 1 == 1
    }

    fn clear(&mut self, block: usize) {
        self.bits[block / 64] &= !(1u64 << (block % 64));
    }

    pub fn kept_count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Fraction of blocks pruned.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.kept_count() as f64 / self.n_blocks() as f64
    }

    /// Zero every pruned block in row-major `data` (a matrix the mask
    /// was built for). Used on both weights and their gradients.
    pub fn apply_to_slice<F: Scalar>(&self, data: &mut [F]) -> Result<()> {
        if data.len() != self.rows * self.cols {
            return Err(FeatherError::DimensionMismatch {
                op: "mask_apply",
                lhs: vec![self.rows, self.cols],
                rhs: vec![data.len()],
            });
        }
        let (_, gc) = self.grid();
        for b in 0..self.n_blocks() {
            if self.is_kept(b) {
                continue;
            }
            let (br, bc) = (b / gc, b % gc);
            for r in 0..self.block_rows {
                let row = br * self.block_rows + r;
                let start = row * self.cols + bc * self.block_cols;
                for v in &mut data[start..start + self.block_cols] {
                    *v = F::zero();
                }
            }
        }
        Ok(())
    }

    pub fn apply<F: Scalar>(&self, weights: &mut Tensor<F>) -> Result<()> {
        if weights.shape() != [self.rows, self.cols] {
            return Err(FeatherError::DimensionMismatch {
                op: "mask_apply",
                lhs: vec![self.rows, self.cols],
                rhs: weights.shape().to_vec(),
            });
        }
        self.apply_to_slice(weights.data_mut())
    }
}

/// Mean absolute value of each block, block-row-major, in f64 so the
/// ranking does not depend on the working precision.
fn block_means<F: Scalar>(weights: &Tensor<F>, mask: &BlockMask) -> Vec<f64> {
    let (gr, gc) = mask.grid();
    let (brh, bcw) = mask.block_shape();
    let mut means = Vec::with_capacity(gr * gc);
    for b in 0..gr * gc {
        let (br, bc) = (b / gc, b % gc);
        let mut acc = 0.0f64;
        for r in 0..brh {
            let row = br * brh + r;
            for c in 0..bcw {
                acc += weights.at2(row, bc * bcw + c).to_f64c().abs();
            }
        }
        means.push(acc / (brh * bcw) as f64);
    }
    means
}

/// Grow `mask` until at least `ceil(target * n_blocks)` blocks are
/// pruned, removing surviving blocks in order of mean absolute weight
/// (ties broken by block position). Already-pruned blocks stay pruned.
pub fn prune_to<F: Scalar>(
    weights: &Tensor<F>,
    mask: &BlockMask,
    target: f64,
) -> Result<BlockMask> {
    if !(0.0..1.0).contains(&target) {
        return Err(FeatherError::Config(format!(
            "prune target must be in [0, 1), got {target}"
        )));
    }
    if weights.shape() != [mask.rows(), mask.cols()] {
        return Err(FeatherError::DimensionMismatch {
            op: "prune_to",
            lhs: weights.shape().to_vec(),
            rhs: vec![mask.rows(), mask.cols()],
        });
    }
    let n = mask.n_blocks();
    let want_pruned = (target * n as f64).ceil() as usize;
    let have_pruned = n - mask.kept_count();
    if want_pruned <= have_pruned {
        return Ok(mask.clone());
    }

    let means = block_means(weights, mask);
    let (_, gc) = mask.grid();
    let mut kept: Vec<usize> = (0..n).filter(|&b| mask.is_kept(b)).collect();
    kept.sort_by(|&a, &b| {
        means[a]
            .partial_cmp(&means[b])
            .expect("weights are finite")
            .then_with(|| (a / gc, a % gc).cmp(&(b / gc, b % gc)))
    });

    let mut out = mask.clone();
    for &b in kept.iter().take(want_pruned - have_pruned) {
        out.clear(b);
    }
    Ok(out)
}

/// Kept blocks of a matrix in block-row-major order, with a CSR-style
/// index over block rows.
#[derive(Debug, Clone)]
pub struct BlockSparseMatrix<F: Scalar> {
    rows: usize,
    cols: usize,
    block_rows: usize,
    block_cols: usize,
    /// (block column index, values row-major within the block)
    blocks: Vec<(usize, Vec<F>)>,
    /// `blocks` range for each block row; length grid_rows + 1.
    row_ptr: Vec<usize>,
}

impl<F: Scalar> BlockSparseMatrix<F> {
    pub fn from_dense(weights: &Tensor<F>, mask: &BlockMask) -> Result<Self> {
        if weights.shape() != [mask.rows(), mask.cols()] {
            return Err(FeatherError::DimensionMismatch {
                op: "block_sparse_from_dense",
                lhs: weights.shape().to_vec(),
                rhs: vec![mask.rows(), mask.cols()],
            });
        }
        let (gr, gc) = mask.grid();
        let (brh, bcw) = mask.block_shape();
        let mut blocks = Vec::with_capacity(mask.kept_count());
        let mut row_ptr = Vec::with_capacity(gr + 1);
        row_ptr.push(0);
        for br in 0..gr {
            for bc in 0..gc {
                if !mask.is_kept(br * gc + bc) {
                    continue;
                }
                let mut vals = Vec::with_capacity(brh * bcw);
                for r in 0..brh {
                    for c in 0..bcw {
                        vals.push(weights.at2(br * brh + r, bc * bcw + c));
                    }
                }
                blocks.push((bc, vals));
            }
            row_ptr.push(blocks.len());
        }
        Ok(BlockSparseMatrix {
            rows: mask.rows(),
            cols: mask.cols(),
            block_rows: brh,
            block_cols: bcw,
            blocks,
            row_ptr,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn kept_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Scalar multiplications one matvec performs.
    pub fn multiplies_per_matvec(&self) -> u64 {
        (self.blocks.len() * self.block_rows * self.block_cols) as u64
    }

    /// Dense reconstruction (pruned blocks zero).
    pub fn to_masked_dense(&self) -> Tensor<F> {
        let mut data = vec![F::zero(); self.rows * self.cols];
        let gr = self.rows / self.block_rows;
        for brow in 0..gr {
            for bi in self.row_ptr[brow]..self.row_ptr[brow + 1] {
                let (bc, vals) = &self.blocks[bi];
                for r in 0..self.block_rows {
                    let row = brow * self.block_rows + r;
                    for c in 0..self.block_cols {
                        data[row * self.cols + bc * self.block_cols + c] =
                            vals[r * self.block_cols + c];
                    }
                }
            }
        }
        Tensor::new(vec![self.rows, self.cols], data).expect("stored values are finite")
    }

    /// `y = W x`, visiting blocks left to right within each block row so
    /// a fully dense mask reproduces the dense product bit for bit.
    pub fn matvec(&self, x: &[F]) -> Result<Vec<F>> {
        self.matvec_impl(x, None)
    }

    /// As [`matvec`](Self::matvec), also adding every scalar multiply to
    /// `count`.
    pub fn matvec_counting(&self, x: &[F], count: &mut u64) -> Result<Vec<F>> {
        self.matvec_impl(x, Some(count))
    }

    fn matvec_impl(&self, x: &[F], mut count: Option<&mut u64>) -> Result<Vec<F>> {
        if x.len() != self.cols {
            return Err(FeatherError::DimensionMismatch {
                op: "sparse_matvec",
                lhs: vec![self.rows, self.cols],
                rhs: vec![x.len()],
            });
        }
        let gr = self.rows / self.block_rows;
        let mut y = vec![F::zero(); self.rows];
        let mut acc = vec![F::zero(); self.block_rows];
        for brow in 0..gr {
            for a in acc.iter_mut() {
                *a = F::zero();
            }
            for bi in self.row_ptr[brow]..self.row_ptr[brow + 1] {
                let (bc, vals) = &self.blocks[bi];
                let x0 = bc * self.block_cols;
                for r in 0..self.block_rows {
                    let mut local = acc[r];
                    for c in 0..self.block_cols {
                        local = local + vals[r * self.block_cols + c] * x[x0 + c];
                    }
                    acc[r] = local;
                }
                if let Some(count) = count.as_deref_mut() {
                    *count += (self.block_rows * self.block_cols) as u64;
                }
            }
            y[brow * self.block_rows..(brow + 1) * self.block_rows].copy_from_slice(&acc);
        }
        Ok(y)
    }
}

/// Plain dense `y = W x` mirroring the tape matvec accumulation order.
pub fn dense_matvec<F: Scalar>(weights: &Tensor<F>, x: &[F]) -> Result<Vec<F>> {
    if weights.shape().len() != 2 || weights.cols() != x.len() {
        return Err(FeatherError::DimensionMismatch {
            op: "dense_matvec",
            lhs: weights.shape().to_vec(),
            rhs: vec![x.len()],
        });
    }
    let mut y = Vec::with_capacity(weights.rows());
    for r in 0..weights.rows() {
        let mut acc = F::zero();
        for (w, xv) in weights.row(r).iter().zip(x.iter()) {
            acc = acc + *w * *xv;
        }
        y.push(acc);
    }
    Ok(y)
}

/// A weight matrix in whichever storage the decoder is running.
#[derive(Debug, Clone)]
pub enum KernelMat<F: Scalar> {
    Dense(Tensor<F>),
    Sparse(BlockSparseMatrix<F>),
}

impl<F: Scalar> KernelMat<F> {
    pub fn rows(&self) -> usize {
        match self {
            KernelMat::Dense(t) => t.rows(),
            KernelMat::Sparse(s) => s.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            KernelMat::Dense(t) => t.cols(),
            KernelMat::Sparse(s) => s.cols(),
        }
    }

    pub fn matvec(&self, x: &[F], count: Option<&mut u64>) -> Result<Vec<F>> {
        match self {
            KernelMat::Dense(t) => {
                let y = dense_matvec(t, x)?;
                if let Some(count) = count {
                    *count += (t.rows() * t.cols()) as u64;
                }
                Ok(y)
            }
            KernelMat::Sparse(s) => match count {
                Some(count) => s.matvec_counting(x, count),
                None => s.matvec(x),
            },
        }
    }
}

/// LSTM hidden and cell state.
#[derive(Debug, Clone)]
pub struct LstmState<F: Scalar> {
    pub h: Vec<F>,
    pub c: Vec<F>,
}

impl<F: Scalar> LstmState<F> {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![F::zero(); hidden],
            c: vec![F::zero(); hidden],
        }
    }
}

/// One LSTM step over a combined kernel `[4H x (I + H)]` applied to
/// `[x; h_prev]`, gate rows ordered input, forget, cell, output.
pub fn lstm_step<F: Scalar>(
    kernel: &KernelMat<F>,
    bias: &[F],
    x: &[F],
    state: &LstmState<F>,
    count: Option<&mut u64>,
) -> Result<LstmState<F>> {
    let hidden = state.h.len();
    if kernel.rows() != 4 * hidden
        || kernel.cols() != x.len() + hidden
        || bias.len() != 4 * hidden
    {
        return Err(FeatherError::DimensionMismatch {
            op: "lstm_step",
            lhs: vec![kernel.rows(), kernel.cols()],
            rhs: vec![4 * hidden, x.len() + hidden],
        });
    }
    let mut xh = Vec::with_capacity(x.len() + hidden);
    xh.extend_from_slice(x);
    xh.extend_from_slice(&state.h);
    let gates = kernel.matvec(&xh, count)?;

    let mut h = Vec::with_capacity(hidden);
    let mut c = Vec::with_capacity(hidden);
    for r in 0..hidden {
        let i = scalar::sigmoid(gates[r] + bias[r]);
        let f = scalar::sigmoid(gates[hidden + r] + bias[hidden + r]);
        let g = (gates[2 * hidden + r] + bias[2 * hidden + r]).tanh();
        let o = scalar::sigmoid(gates[3 * hidden + r] + bias[3 * hidden + r]);
        let cr = f * state.c[r] + i * g;
        c.push(cr);
        h.push(o * cr.tanh());
    }
    Ok(LstmState { h, c })
}

/// Expected multiply count for one sparse LSTM step at a given block
/// sparsity: `4 (1 - s) (input * hidden + hidden^2)`.
pub fn count_ops(input_dim: usize, hidden: usize, sparsity: f64) -> f64 {
    4.0 * (1.0 - sparsity) * (input_dim * hidden + hidden * hidden) as f64
}
