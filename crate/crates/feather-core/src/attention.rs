//! Alignment mechanisms: monotonic Gaussian attention and the
//! mixture-of-Gaussians (GMMv2b-style) baseline.
//!
//! Encoder positions are 1-based (`j = 1..=J`) so the stop rule
//! `mu >= J + 1` reads literally; internal arrays stay 0-based and the
//! shift happens here, at the alignment boundary.
//!
//! Each mechanism has two implementations sharing the same scalar
//! kernels: a tape form used during training (fully differentiable) and
//! a plain form used by the inference decoder. At equal precision the
//! two produce the same values.

use crate::error::{FeatherError, Result};
use crate::scalar::{self, Scalar};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const SQRT_TWO_PI: f64 = 2.5066282746310002;

/// Which alignment mechanism a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Gaussian,
    Gmmv2b,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Gaussian => "gaussian",
            Mechanism::Gmmv2b => "gmmv2b",
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian" => Ok(Mechanism::Gaussian),
            "gmmv2b" => Ok(Mechanism::Gmmv2b),
            other => Err(format!(
                "unknown mechanism `{other}` (expected gaussian or gmmv2b)"
            )),
        }
    }
}

/// Mechanism parameters that are fixed at model construction.
///
/// `bias_delta` / `bias_sigma` are added to the projected intermediates
/// before softplus, steering the initial step size and window width.
/// The mixture baseline defaults to softplus(bias) of 1.0 and 10.0; the
/// Gaussian mechanism defaults to no added bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub mechanism: Mechanism,
    /// Mixture component count K (ignored by the Gaussian mechanism).
    pub components: usize,
    /// Initial attention position.
    pub mu0: f64,
    pub bias_delta: f64,
    pub bias_sigma: f64,
}

impl AttentionConfig {
    pub fn gaussian() -> Self {
        AttentionConfig {
            mechanism: Mechanism::Gaussian,
            components: 1,
            mu0: 0.0,
            bias_delta: 0.0,
            bias_sigma: 0.0,
        }
    }

    pub fn gmmv2b(components: usize) -> Self {
        AttentionConfig {
            mechanism: Mechanism::Gmmv2b,
            components,
            mu0: 0.0,
            bias_delta: scalar::softplus_inverse(1.0),
            bias_sigma: scalar::softplus_inverse(10.0),
        }
    }

    /// Width of the projected intermediate vector.
    pub fn intermediate_dim(&self) -> usize {
        match self.mechanism {
            Mechanism::Gaussian => 2,
            Mechanism::Gmmv2b => 3 * self.components,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mechanism == Mechanism::Gmmv2b && self.components < 1 {
            return Err(FeatherError::Config(
                "gmmv2b requires at least one mixture component".into(),
            ));
        }
        Ok(())
    }
}

/// Learned affine projection from the attention-RNN state to the
/// mechanism intermediates.
#[derive(Debug, Clone)]
pub struct AttentionProjection<F: Scalar> {
    /// `[P x query_dim]` where P is [`AttentionConfig::intermediate_dim`].
    pub weight: Tensor<F>,
    /// `[P]`
    pub bias: Tensor<F>,
}

impl<F: Scalar> AttentionProjection<F> {
    fn apply(&self, query: &[F]) -> Vec<F> {
        let rows = self.weight.rows();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = F::zero();
            for (w, x) in self.weight.row(r).iter().zip(query.iter()) {
                acc = acc + *w * *x;
            }
            out.push(acc + self.bias.data()[r]);
        }
        out
    }
}

// ── states ──────────────────────────────────────────────────────────

/// Gaussian attention state after a decode step.
#[derive(Debug, Clone, Copy)]
pub struct GaussianAttentionState<F: Scalar> {
    pub mu: F,
    pub sigma: F,
    pub delta: F,
    pub step_index: usize,
}

/// One mixture component of the GMM state.
#[derive(Debug, Clone, Copy)]
pub struct GmmComponent<F: Scalar> {
    pub mu: F,
    pub sigma: F,
    pub omega: F,
    /// Normalizer sqrt(2 pi) * sigma.
    pub z: F,
}

#[derive(Debug, Clone)]
pub struct GmmAttentionState<F: Scalar> {
    pub components: Vec<GmmComponent<F>>,
    pub step_index: usize,
}

impl<F: Scalar> GmmAttentionState<F> {
    /// Weight-averaged position, the scalar summary used for the stop
    /// rule and decode traces.
    pub fn mean_position(&self) -> F {
        let mut acc = F::zero();
        for c in &self.components {
            acc = acc + c.omega * c.mu;
        }
        acc
    }
}

#[derive(Debug, Clone)]
pub enum AttentionState<F: Scalar> {
    Gaussian(GaussianAttentionState<F>),
    Gmm(GmmAttentionState<F>),
}

impl<F: Scalar> AttentionState<F> {
    /// Scalar attention position: mu, or the omega-weighted mean for the
    /// mixture mechanism.
    pub fn position(&self) -> F {
        match self {
            AttentionState::Gaussian(s) => s.mu,
            AttentionState::Gmm(s) => s.mean_position(),
        }
    }

    pub fn step_index(&self) -> usize {
        match self {
            AttentionState::Gaussian(s) => s.step_index,
            AttentionState::Gmm(s) => s.step_index,
        }
    }
}

/// Attention weights over encoder positions for one decode step.
#[derive(Debug, Clone)]
pub struct AlignmentVector<F: Scalar> {
    pub weights: Vec<F>,
    pub mechanism: Mechanism,
    pub step_index: usize,
}

/// Fresh pre-decode state for either mechanism.
pub fn initial_state<F: Scalar>(config: &AttentionConfig) -> Result<AttentionState<F>> {
    config.validate()?;
    match config.mechanism {
        Mechanism::Gaussian => Ok(AttentionState::Gaussian(GaussianAttentionState {
            mu: F::from_f64c(config.mu0),
            sigma: F::one(),
            delta: F::zero(),
            step_index: 0,
        })),
        Mechanism::Gmmv2b => {
            let k = config.components;
            let sigma0 = scalar::softplus(F::from_f64c(config.bias_sigma));
            let omega0 = F::one() / F::from_f64c(k as f64);
            let comp = GmmComponent {
                mu: F::from_f64c(config.mu0),
                sigma: sigma0,
                omega: omega0,
                z: F::from_f64c(SQRT_TWO_PI) * sigma0,
            };
            Ok(AttentionState::Gmm(GmmAttentionState {
                components: vec![comp; k],
                step_index: 0,
            }))
        }
    }
}

fn check_attend_inputs<F: Scalar>(query: &[F], j_len: usize) -> Result<()> {
    if j_len < 1 {
        return Err(FeatherError::Contract(
            "attention requires at least one encoder position".into(),
        ));
    }
    if !query.iter().all(|v| v.is_finite()) {
        return Err(FeatherError::NonFinite { op: "attend" });
    }
    Ok(())
}

// ── plain (inference) forms ─────────────────────────────────────────

/// One Gaussian attention step: project the query, advance the mean,
/// emit the window `alpha_j = exp(-(j - mu)^2 / (2 sigma^2))`.
pub fn gaussian_attend<F: Scalar>(
    proj: &AttentionProjection<F>,
    config: &AttentionConfig,
    state_prev: &GaussianAttentionState<F>,
    query: &[F],
    j_len: usize,
) -> Result<(AlignmentVector<F>, GaussianAttentionState<F>)> {
    check_attend_inputs(query, j_len)?;
    if state_prev.step_index > 0 && (state_prev.sigma <= F::zero() || state_prev.delta <= F::zero())
    {
        return Err(FeatherError::Contract(
            "gaussian attention state has non-positive sigma or delta".into(),
        ));
    }
    let p = proj.apply(query);
    let delta = scalar::softplus(p[0] + F::from_f64c(config.bias_delta));
    let sigma = scalar::softplus(p[1] + F::from_f64c(config.bias_sigma));
    let mu = state_prev.mu + delta;
    if !mu.is_finite() {
        return Err(FeatherError::NonFinite { op: "gaussian_attend" });
    }
    let weights = (0..j_len)
        .map(|j0| scalar::gaussian_weight(F::from_f64c((j0 + 1) as f64), mu, sigma))
        .collect();
    let state = GaussianAttentionState {
        mu,
        sigma,
        delta,
        step_index: state_prev.step_index + 1,
    };
    Ok((
        AlignmentVector {
            weights,
            mechanism: Mechanism::Gaussian,
            step_index: state.step_index,
        },
        state,
    ))
}

/// One mixture attention step with softmax/softplus parameterization:
/// `alpha_j = sum_k (omega_k / Z_k) exp(-(j - mu_k)^2 / (2 sigma_k^2))`.
pub fn gmmv2b_attend<F: Scalar>(
    proj: &AttentionProjection<F>,
    config: &AttentionConfig,
    state_prev: &GmmAttentionState<F>,
    query: &[F],
    j_len: usize,
) -> Result<(AlignmentVector<F>, GmmAttentionState<F>)> {
    check_attend_inputs(query, j_len)?;
    let k = state_prev.components.len();
    if k < 1 {
        return Err(FeatherError::Contract("gmm state has no components".into()));
    }
    let p = proj.apply(query);
    let mut omega: Vec<F> = p[..k].to_vec();
    scalar::softmax_in_place(&mut omega);

    let bias_d = F::from_f64c(config.bias_delta);
    let bias_s = F::from_f64c(config.bias_sigma);
    let sqrt_two_pi = F::from_f64c(SQRT_TWO_PI);

    let mut components = Vec::with_capacity(k);
    let mut weights = vec![F::zero(); j_len];
    for ki in 0..k {
        let delta = scalar::softplus(p[k + ki] + bias_d);
        let sigma = scalar::softplus(p[2 * k + ki] + bias_s);
        let mu = state_prev.components[ki].mu + delta;
        if !mu.is_finite() {
            return Err(FeatherError::NonFinite { op: "gmmv2b_attend" });
        }
        let z = sqrt_two_pi * sigma;
        let coef = omega[ki] / z;
        for (j0, w) in weights.iter_mut().enumerate() {
            let e = scalar::gaussian_weight(F::from_f64c((j0 + 1) as f64), mu, sigma);
            *w = *w + e * coef;
        }
        components.push(GmmComponent {
            mu,
            sigma,
            omega: omega[ki],
            z,
        });
    }
    let state = GmmAttentionState {
        components,
        step_index: state_prev.step_index + 1,
    };
    Ok((
        AlignmentVector {
            weights,
            mechanism: Mechanism::Gmmv2b,
            step_index: state.step_index,
        },
        state,
    ))
}

/// Dispatch over either mechanism.
pub fn attend<F: Scalar>(
    proj: &AttentionProjection<F>,
    config: &AttentionConfig,
    state_prev: &AttentionState<F>,
    query: &[F],
    j_len: usize,
) -> Result<(AlignmentVector<F>, AttentionState<F>)> {
    match state_prev {
        AttentionState::Gaussian(s) => {
            let (a, s) = gaussian_attend(proj, config, s, query, j_len)?;
            Ok((a, AttentionState::Gaussian(s)))
        }
        AttentionState::Gmm(s) => {
            let (a, s) = gmmv2b_attend(proj, config, s, query, j_len)?;
            Ok((a, AttentionState::Gmm(s)))
        }
    }
}

/// Weighted average of encoder outputs: `c = sum_j alpha_j h_j`.
pub fn context_vector<F: Scalar>(
    alignment: &[F],
    encoder_outputs: &Tensor<F>,
) -> Result<Vec<F>> {
    if encoder_outputs.shape().len() != 2 || alignment.len() != encoder_outputs.rows() {
        return Err(FeatherError::DimensionMismatch {
            op: "context_vector",
            lhs: vec![alignment.len()],
            rhs: encoder_outputs.shape().to_vec(),
        });
    }
    let cols = encoder_outputs.cols();
    let mut out = vec![F::zero(); cols];
    for (j, &w) in alignment.iter().enumerate() {
        let row = encoder_outputs.row(j);
        for c in 0..cols {
            out[c] = out[c] + w * row[c];
        }
    }
    Ok(out)
}

// ── tape (training) forms ───────────────────────────────────────────

/// Attention projection registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapeAttentionParams {
    pub weight: ValueId,
    pub bias: ValueId,
}

/// Differentiable attention state: the accumulated mean(s) on the tape.
#[derive(Debug, Clone, Copy)]
pub struct TapeAttentionState {
    /// `[1]` for Gaussian, `[K]` for the mixture.
    pub mu: ValueId,
    pub step_index: usize,
}

/// Constant `[1..=J]` position vector.
fn positions<F: Scalar>(tape: &mut Tape<F>, j_len: usize) -> ValueId {
    let data: Vec<F> = (1..=j_len).map(|j| F::from_f64c(j as f64)).collect();
    tape.constant(Tensor::new(vec![j_len], data).expect("positions are finite"))
}

/// Initial tape state (constant, so gradients stop at mu0).
pub fn initial_state_tape<F: Scalar>(
    tape: &mut Tape<F>,
    config: &AttentionConfig,
) -> Result<TapeAttentionState> {
    config.validate()?;
    let mu0 = F::from_f64c(config.mu0);
    let mu = match config.mechanism {
        Mechanism::Gaussian => tape.constant(Tensor::scalar(mu0)),
        Mechanism::Gmmv2b => {
            tape.constant(Tensor::filled(vec![config.components], mu0))
        }
    };
    Ok(TapeAttentionState { mu, step_index: 0 })
}

/// Gaussian bump on the tape for a scalar (mu, sigma) pair.
fn tape_gaussian_bump<F: Scalar>(
    tape: &mut Tape<F>,
    pos: ValueId,
    mu: ValueId,
    sigma: ValueId,
) -> Result<ValueId> {
    let diff = tape.sub(pos, mu)?;
    let sq = tape.mul(diff, diff)?;
    let num = tape.scale(sq, F::from_f64c(-0.5))?;
    let var = tape.mul(sigma, sigma)?;
    let expo = tape.div(num, var)?;
    tape.exp(expo)
}

/// Result of a differentiable attention step.
#[derive(Debug, Clone, Copy)]
pub struct TapeAttendOut {
    /// Alignment weights `[J]`.
    pub alpha: ValueId,
    pub state: TapeAttentionState,
    /// Scalar position `[1]`: mu, or the omega-weighted mean of the
    /// mixture means. Drives the stop objective.
    pub position: ValueId,
}

/// Differentiable attention step. Returns the alignment vector `[J]` and
/// the advanced state; gradients flow into the projection and, through
/// the accumulated mean, into every earlier step.
pub fn attend_tape<F: Scalar>(
    tape: &mut Tape<F>,
    params: &TapeAttentionParams,
    config: &AttentionConfig,
    state_prev: &TapeAttentionState,
    query: ValueId,
    j_len: usize,
) -> Result<TapeAttendOut> {
    if j_len < 1 {
        return Err(FeatherError::Contract(
            "attention requires at least one encoder position".into(),
        ));
    }
    let proj = tape.matvec(params.weight, query)?;
    let proj = tape.add(proj, params.bias)?;
    let pos = positions(tape, j_len);

    match config.mechanism {
        Mechanism::Gaussian => {
            let delta_hat = tape.slice(proj, 0, 1)?;
            let sigma_hat = tape.slice(proj, 1, 1)?;
            let delta_hat = add_const_bias(tape, delta_hat, config.bias_delta)?;
            let sigma_hat = add_const_bias(tape, sigma_hat, config.bias_sigma)?;
            let delta = tape.softplus(delta_hat)?;
            let sigma = tape.softplus(sigma_hat)?;
            let mu = tape.add(state_prev.mu, delta)?;
            let alpha = tape_gaussian_bump(tape, pos, mu, sigma)?;
            Ok(TapeAttendOut {
                alpha,
                state: TapeAttentionState {
                    mu,
                    step_index: state_prev.step_index + 1,
                },
                position: mu,
            })
        }
        Mechanism::Gmmv2b => {
            let k = config.components;
            let omega_hat = tape.slice(proj, 0, k)?;
            let delta_hat = tape.slice(proj, k, k)?;
            let sigma_hat = tape.slice(proj, 2 * k, k)?;
            let omega = tape.softmax(omega_hat, 0)?;
            let delta_hat = add_const_bias(tape, delta_hat, config.bias_delta)?;
            let sigma_hat = add_const_bias(tape, sigma_hat, config.bias_sigma)?;
            let delta = tape.softplus(delta_hat)?;
            let sigma = tape.softplus(sigma_hat)?;
            let mu = tape.add(state_prev.mu, delta)?;
            let z = tape.scale(sigma, F::from_f64c(SQRT_TWO_PI))?;
            let coef = tape.div(omega, z)?;

            let mut alpha: Option<ValueId> = None;
            for ki in 0..k {
                let mu_k = tape.slice(mu, ki, 1)?;
                let sigma_k = tape.slice(sigma, ki, 1)?;
                let bump = tape_gaussian_bump(tape, pos, mu_k, sigma_k)?;
                let coef_k = tape.slice(coef, ki, 1)?;
                let term = tape.mul(bump, coef_k)?;
                alpha = Some(match alpha {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            let weighted = tape.mul(omega, mu)?;
            let position = tape.sum_all(weighted)?;
            Ok(TapeAttendOut {
                alpha: alpha.expect("k >= 1"),
                state: TapeAttentionState {
                    mu,
                    step_index: state_prev.step_index + 1,
                },
                position,
            })
        }
    }
}

fn add_const_bias<F: Scalar>(tape: &mut Tape<F>, x: ValueId, bias: f64) -> Result<ValueId> {
    if bias == 0.0 {
        return Ok(x);
    }
    let n = tape.value(x).numel();
    let b = tape.constant(Tensor::filled(vec![n], F::from_f64c(bias)));
    tape.add(x, b)
}

// ── exports ─────────────────────────────────────────────────────────

/// Alignment matrix as CSV: one row per decode step, one column per
/// encoder position, six decimal places.
pub fn alignment_to_csv<F: Scalar>(alignments: &[AlignmentVector<F>]) -> String {
    let mut out = String::new();
    for a in alignments {
        let mut first = true;
        for w in &a.weights {
            if !first {
                out.push(',');
            }
            out.push_str(&format!("{:.6}", w.to_f64c()));
            first = false;
        }
        out.push('\n');
    }
    out
}

/// Alignment matrix as a binary 8-bit PGM image (one pixel per weight,
/// rows = decode steps). Weights above 1 (possible for the unnormalized
/// mixture) are scaled by the global maximum.
pub fn alignment_to_pgm<F: Scalar>(alignments: &[AlignmentVector<F>]) -> Vec<u8> {
    let height = alignments.len();
    let width = alignments.first().map_or(0, |a| a.weights.len());
    let mut max = 1.0f64;
    for a in alignments {
        for w in &a.weights {
            max = max.max(w.to_f64c());
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for a in alignments {
        for w in &a.weights {
            let v = (w.to_f64c() / max * 255.0).round().clamp(0.0, 255.0) as u8;
            out.push(v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn proj_from<F: Scalar>(weight: Vec<f64>, bias: Vec<f64>, qdim: usize) -> AttentionProjection<F> {
        let p = bias.len();
        AttentionProjection {
            weight: Tensor::from_f64_slice(vec![p, qdim], &weight).unwrap(),
            bias: Tensor::from_f64_slice(vec![p], &bias).unwrap(),
        }
    }

    /// Projection with zero weights: the intermediates equal the biases,
    /// giving direct control of delta and sigma.
    fn fixed_gaussian_proj<F: Scalar>(delta: f64, sigma: f64) -> AttentionProjection<F> {
        proj_from(
            vec![0.0; 2 * 3],
            vec![
                scalar::softplus_inverse(delta),
                scalar::softplus_inverse(sigma),
            ],
            3,
        )
    }

    fn step_gaussian<F: Scalar>(
        proj: &AttentionProjection<F>,
        state: &GaussianAttentionState<F>,
        j: usize,
    ) -> (AlignmentVector<F>, GaussianAttentionState<F>) {
        let cfg = AttentionConfig::gaussian();
        gaussian_attend(proj, &cfg, state, &[F::zero(), F::zero(), F::zero()], j).unwrap()
    }

    fn gaussian_init<F: Scalar>() -> GaussianAttentionState<F> {
        match initial_state::<F>(&AttentionConfig::gaussian()).unwrap() {
            AttentionState::Gaussian(s) => s,
            _ => unreachable!(),
        }
    }

    #[test]
    fn peak_is_one_at_mu() {
        // advance to mu = 3 with a single step of delta 3, sigma 1
        let proj = fixed_gaussian_proj::<f64>(3.0, 1.0);
        let (a, s) = step_gaussian(&proj, &gaussian_init(), 5);
        assert!((s.mu - 3.0).abs() < 1e-12);
        // j = 3 is index 2
        assert_eq!(a.weights[2], 1.0);
        assert!((a.weights[3] - (-0.5f64).exp()).abs() < 1e-9);
        assert!((a.weights[3] - 0.606531).abs() < 1e-6);
        // symmetry about mu
        assert!((a.weights[1] - a.weights[3]).abs() < 1e-12);
    }

    #[test]
    fn zero_intermediate_advances_by_ln_two() {
        let proj = proj_from::<f64>(vec![0.0; 6], vec![0.0, 0.0], 3);
        let (_, s) = step_gaussian(&proj, &gaussian_init(), 4);
        assert!((s.delta - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((s.mu - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn gaussian_weights_bounded_and_peaked() {
        let proj = fixed_gaussian_proj::<f64>(2.4, 0.7);
        let mut state = gaussian_init();
        for _ in 0..20 {
            let (a, next) = step_gaussian(&proj, &state, 8);
            for &w in &a.weights {
                assert!(w > 0.0 && w <= 1.0);
            }
            // maximal weight at the encoder index nearest mu
            let nearest = (next.mu.round().clamp(1.0, 8.0) - 1.0) as usize;
            let max_idx = a
                .weights
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(max_idx, nearest);
            state = next;
        }
    }

    #[test]
    fn mu_strictly_increases_over_random_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let qdim = 16;
        let cfg = AttentionConfig::gaussian();
        let proj = AttentionProjection::<f64> {
            weight: Tensor::init_uniform(vec![2, qdim], qdim, &mut rng),
            bias: Tensor::zeros(vec![2]),
        };
        let mut state = gaussian_init::<f64>();
        for _ in 0..1000 {
            let query: Vec<f64> = (0..qdim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, next) = gaussian_attend(&proj, &cfg, &state, &query, 6).unwrap();
            assert!(next.mu > state.mu, "mu must strictly increase");
            assert!(next.delta > 0.0 && next.sigma > 0.0);
            state = next;
        }
    }

    #[test]
    fn gmm_single_component_peak_is_inverse_z() {
        let cfg = AttentionConfig {
            mechanism: Mechanism::Gmmv2b,
            components: 1,
            mu0: 0.0,
            bias_delta: 0.0,
            bias_sigma: 0.0,
        };
        // omega = softmax over one logit = 1; delta = 3, sigma = 1
        let proj = proj_from::<f64>(
            vec![0.0; 3 * 2],
            vec![0.0, scalar::softplus_inverse(3.0), scalar::softplus_inverse(1.0)],
            2,
        );
        let init = match initial_state::<f64>(&cfg).unwrap() {
            AttentionState::Gmm(s) => s,
            _ => unreachable!(),
        };
        let (a, s) = gmmv2b_attend(&proj, &cfg, &init, &[0.0, 0.0], 5).unwrap();
        assert!((s.components[0].mu - 3.0).abs() < 1e-12);
        // alpha at j = 3: 1 / sqrt(2 pi)
        assert!((a.weights[2] - 0.398942).abs() < 1e-6);
        assert!((s.components[0].omega - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gmm_reduces_to_scaled_gaussian_at_k1() {
        // identical (mu, sigma) trajectories: gmm weights == gaussian / Z
        let gcfg = AttentionConfig::gaussian();
        let mcfg = AttentionConfig {
            mechanism: Mechanism::Gmmv2b,
            components: 1,
            mu0: 0.0,
            bias_delta: 0.0,
            bias_sigma: 0.0,
        };
        let gproj = fixed_gaussian_proj::<f64>(1.7, 0.9);
        let mproj = proj_from::<f64>(
            vec![0.0; 3 * 3],
            vec![0.0, scalar::softplus_inverse(1.7), scalar::softplus_inverse(0.9)],
            3,
        );
        let q = [0.0, 0.0, 0.0];
        let mut gs = gaussian_init::<f64>();
        let mut ms = match initial_state::<f64>(&mcfg).unwrap() {
            AttentionState::Gmm(s) => s,
            _ => unreachable!(),
        };
        for _ in 0..10 {
            let (ga, gn) = gaussian_attend(&gproj, &gcfg, &gs, &q, 7).unwrap();
            let (ma, mn) = gmmv2b_attend(&mproj, &mcfg, &ms, &q, 7).unwrap();
            let z = mn.components[0].z;
            for (gw, mw) in ga.weights.iter().zip(ma.weights.iter()) {
                assert!((gw / z - mw).abs() < 1e-6);
            }
            gs = gn;
            ms = mn;
        }
    }

    #[test]
    fn gmm_omegas_sum_to_one_and_mus_never_decrease() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let qdim = 12;
        let cfg = AttentionConfig::gmmv2b(5);
        let proj = AttentionProjection::<f64> {
            weight: Tensor::init_uniform(vec![15, qdim], qdim, &mut rng),
            bias: Tensor::zeros(vec![15]),
        };
        let mut state = match initial_state::<f64>(&cfg).unwrap() {
            AttentionState::Gmm(s) => s,
            _ => unreachable!(),
        };
        for _ in 0..50 {
            let query: Vec<f64> = (0..qdim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (a, next) = gmmv2b_attend(&proj, &cfg, &state, &query, 9).unwrap();
            let osum: f64 = next.components.iter().map(|c| c.omega).sum();
            assert!((osum - 1.0).abs() < 1e-6);
            for &w in &a.weights {
                assert!(w >= 0.0);
            }
            for (prev, cur) in state.components.iter().zip(next.components.iter()) {
                assert!(cur.mu >= prev.mu);
            }
            state = next;
        }
    }

    #[test]
    fn context_vector_selects_and_averages() {
        let h = Tensor::<f64>::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        // one-hot at j = 2 (index 1)
        let c = context_vector(&[0.0, 1.0, 0.0], &h).unwrap();
        assert_eq!(c, vec![3.0, 4.0]);
        let z = context_vector(&[0.0, 0.0, 0.0], &h).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
        // brute force comparison
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let alpha: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let got = context_vector(&alpha, &h).unwrap();
        for c in 0..2 {
            let want: f64 = (0..3).map(|j| alpha[j] * h.at2(j, c)).sum();
            assert!((got[c] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn context_vector_length_mismatch_errors() {
        let h = Tensor::<f64>::zeros(vec![3, 2]);
        let err = context_vector(&[0.0, 1.0], &h).unwrap_err();
        assert_eq!(err.class(), "contract");
    }

    #[test]
    fn initial_state_defaults() {
        let g = initial_state::<f64>(&AttentionConfig::gaussian()).unwrap();
        match g {
            AttentionState::Gaussian(s) => {
                assert_eq!(s.mu, 0.0);
                assert_eq!(s.step_index, 0);
            }
            _ => panic!("expected gaussian"),
        }
        let cfg = AttentionConfig::gmmv2b(5);
        assert!((cfg.bias_delta - 0.541325).abs() < 1e-6);
        let m = initial_state::<f64>(&cfg).unwrap();
        match m {
            AttentionState::Gmm(s) => {
                assert_eq!(s.components.len(), 5);
                for c in &s.components {
                    assert!((c.omega - 0.2).abs() < 1e-12);
                    assert!((c.sigma - 10.0).abs() < 1e-9);
                }
            }
            _ => panic!("expected gmm"),
        }
    }

    #[test]
    fn zero_component_config_is_rejected() {
        let cfg = AttentionConfig {
            mechanism: Mechanism::Gmmv2b,
            components: 0,
            mu0: 0.0,
            bias_delta: 0.0,
            bias_sigma: 0.0,
        };
        assert!(initial_state::<f64>(&cfg).is_err());
    }

    #[test]
    fn attend_rejects_empty_input_and_non_finite_query() {
        let proj = fixed_gaussian_proj::<f64>(1.0, 1.0);
        let cfg = AttentionConfig::gaussian();
        let st = gaussian_init::<f64>();
        assert!(gaussian_attend(&proj, &cfg, &st, &[0.0, 0.0, 0.0], 0).is_err());
        let err = gaussian_attend(&proj, &cfg, &st, &[f64::NAN, 0.0, 0.0], 4).unwrap_err();
        assert_eq!(err.class(), "numeric");
    }

    #[test]
    fn tape_and_plain_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let qdim = 8;
        let j = 6;
        for cfg in [AttentionConfig::gaussian(), AttentionConfig::gmmv2b(3)] {
            let p = cfg.intermediate_dim();
            let weight = Tensor::<f64>::init_uniform(vec![p, qdim], qdim, &mut rng);
            let bias = Tensor::<f64>::init_uniform(vec![p], p, &mut rng);
            let query: Vec<f64> = (0..qdim).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let proj = AttentionProjection {
                weight: weight.clone(),
                bias: bias.clone(),
            };
            let plain_state = initial_state::<f64>(&cfg).unwrap();
            let (plain_a, plain_next) = attend(&proj, &cfg, &plain_state, &query, j).unwrap();

            let mut tape = Tape::<f64>::new();
            let params = TapeAttentionParams {
                weight: tape.leaf(weight),
                bias: tape.leaf(bias),
            };
            let tstate = initial_state_tape(&mut tape, &cfg).unwrap();
            let q = tape.constant(Tensor::new(vec![qdim], query).unwrap());
            let out = attend_tape(&mut tape, &params, &cfg, &tstate, q, j).unwrap();

            for (a, b) in tape
                .value(out.alpha)
                .data()
                .iter()
                .zip(plain_a.weights.iter())
            {
                assert!((a - b).abs() < 1e-12, "alpha mismatch: {a} vs {b}");
            }
            let tape_pos: f64 = tape.value(out.position).data()[0];
            assert!((tape_pos - plain_next.position()).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_export_has_six_decimals() {
        let a = AlignmentVector::<f64> {
            weights: vec![0.5, 1.0, 0.0001234],
            mechanism: Mechanism::Gaussian,
            step_index: 1,
        };
        let csv = alignment_to_csv(&[a]);
        assert_eq!(csv, "0.500000,1.000000,0.000123\n");
    }

    #[test]
    fn pgm_export_shape_and_range() {
        let rows: Vec<AlignmentVector<f64>> = (0..3)
            .map(|i| AlignmentVector {
                weights: vec![0.0, 0.5, 1.0, 0.25],
                mechanism: Mechanism::Gaussian,
                step_index: i,
            })
            .collect();
        let pgm = alignment_to_pgm(&rows);
        assert!(pgm.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(pgm.len(), b"P5\n4 3\n255\n".len() + 12);
        assert_eq!(pgm[pgm.len() - 2], 255); // the 1.0 weight
    }
}
