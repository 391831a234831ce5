//! Mechanical alignment-quality proxies.
//!
//! Instead of listening tests, decoded alignments are scored for the
//! two classic failure modes: input positions the attention never
//! lands on (skips) and decode stretches where it refuses to move
//! (repeats/stalls), plus whether decoding terminated at all. Every
//! metric lies in [0, 1] and is 0 for a perfect staircase alignment.

use crate::attention::AlignmentVector;
use crate::error::Result;
use crate::model::{infer, InferOptions, ModelConfig, ModelMasks, ModelParams};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct RobustnessOptions {
    /// An input position counts as visited once some step gives it
    /// attention weight above this.
    pub alpha_threshold: f64,
    /// A step advancing the attention position less than this is a
    /// stall candidate.
    pub stall_delta: f64,
    /// Stall candidates only count once a consecutive run grows
    /// longer than this many steps (a model legitimately lingers for
    /// about frames-per-symbol/reduction steps per input position).
    pub stall_run: usize,
    pub max_steps: usize,
}

impl Default for RobustnessOptions {
    fn default() -> Self {
        RobustnessOptions {
            alpha_threshold: 0.3,
            stall_delta: 0.01,
            stall_run: 12,
            max_steps: 400,
        }
    }
}

/// Fraction of input positions that never get weight above `threshold`.
pub fn coverage_error<F: Scalar>(
    alignments: &[AlignmentVector<F>],
    symbols: usize,
    threshold: f64,
) -> f64 {
    if symbols == 0 {
        return 0.0;
    }
    let mut visited = vec![false; symbols];
    for a in alignments {
        for (slot, &w) in visited.iter_mut().zip(a.weights.iter()) {
            if w.to_f64c() > threshold {
                *slot = true;
            }
        }
    }
    visited.iter().filter(|&&v| !v).count() as f64 / symbols as f64
}

/// Fraction of decode steps sitting inside a stalled stretch: more
/// than `run` consecutive steps each advancing the position less than
/// `delta`. `start` is the pre-decode position the first step is
/// measured against.
pub fn stall_fraction(positions: &[f64], start: f64, delta: f64, run: usize) -> f64 {
    if positions.is_empty() {
        return 0.0;
    }
    let mut stalled = 0usize;
    let mut current = 0usize;
    let mut prev = start;
    for &p in positions {
        if p - prev < delta {
            current += 1;
        } else {
            if current > run {
                stalled += current;
            }
            current = 0;
        }
        prev = p;
    }
    if current > run {
        stalled += current;
    }
    stalled as f64 / positions.len() as f64
}

/// Scores for one decoded input.
#[derive(Debug, Clone)]
pub struct UtteranceReport {
    pub index: usize,
    pub symbols: usize,
    pub steps: usize,
    pub truncated: bool,
    pub coverage_error: f64,
    pub stall_fraction: f64,
}

/// Suite-level means.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub label: String,
    pub utterances: usize,
    pub truncation_rate: f64,
    pub mean_coverage_error: f64,
    pub mean_stall_fraction: f64,
}

impl SuiteReport {
    /// Single badness score: non-termination + skips + stalls, in [0, 3].
    pub fn aggregate(&self) -> f64 {
        self.truncation_rate + self.mean_coverage_error + self.mean_stall_fraction
    }
}

/// Decode every input and score its alignment.
pub fn evaluate<F: Scalar>(
    params: &ModelParams<F>,
    masks: &ModelMasks,
    config: &ModelConfig,
    inputs: &[Vec<usize>],
    opts: &RobustnessOptions,
) -> Result<Vec<UtteranceReport>> {
    let infer_opts = InferOptions {
        max_steps: opts.max_steps,
    };
    let mut reports = Vec::with_capacity(inputs.len());
    for (index, ids) in inputs.iter().enumerate() {
        let out = infer(params, masks, config, ids, &infer_opts)?;
        reports.push(UtteranceReport {
            index,
            symbols: ids.len(),
            steps: out.steps,
            truncated: out.trace.truncated,
            coverage_error: coverage_error(&out.trace.alignments, ids.len(), opts.alpha_threshold),
            stall_fraction: stall_fraction(
                &out.trace.positions,
                config.attention.mu0,
                opts.stall_delta,
                opts.stall_run,
            ),
        });
    }
    Ok(reports)
}

/// Average per-utterance scores under one label.
pub fn summarize(label: &str, reports: &[UtteranceReport]) -> SuiteReport {
    let n = reports.len().max(1) as f64;
    SuiteReport {
        label: label.to_string(),
        utterances: reports.len(),
        truncation_rate: reports.iter().filter(|r| r.truncated).count() as f64 / n,
        mean_coverage_error: reports.iter().map(|r| r.coverage_error).sum::<f64>() / n,
        mean_stall_fraction: reports.iter().map(|r| r.stall_fraction).sum::<f64>() / n,
    }
}

pub fn summary_csv(rows: &[SuiteReport]) -> String {
    let mut out =
        String::from("label,utterances,truncation_rate,coverage_error,stall_fraction,aggregate\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.label,
            r.utterances,
            r.truncation_rate,
            r.mean_coverage_error,
            r.mean_stall_fraction,
            r.aggregate()
        ));
    }
    out
}

pub fn per_utterance_csv(rows: &[UtteranceReport]) -> String {
    let mut out = String::from("index,symbols,steps,truncated,coverage_error,stall_fraction\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            r.index, r.symbols, r.steps, r.truncated, r.coverage_error, r.stall_fraction
        ));
    }
    out
}
