//! Synthetic utterance corpus for the toy alignment task.
//!
//! Each symbol id owns a fixed random prototype frame; an utterance's
//! target is its prototypes repeated a few frames each (monotone
//! left-to-right alignment by construction) plus Gaussian noise. Every
//! utterance is generated from its own derived seed, so output is a
//! pure function of [`ToyTaskSpec`] — independent of thread count or
//! generation order.

use crate::bundle::{read_container, write_container};
use crate::error::{FeatherError, Result};
use crate::model::TrainExample;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

/// Knobs for the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTaskSpec {
    pub vocab_size: usize,
    /// Symbols per utterance are drawn uniformly from this range.
    pub min_symbols: usize,
    pub max_symbols: usize,
    /// Mean frames each symbol holds.
    pub frames_per_symbol: usize,
    /// Per-symbol frame count varies by at most this much around the mean.
    pub frame_jitter: usize,
    pub mel_bins: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub count: usize,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec {
            vocab_size: 32,
            min_symbols: 5,
            max_symbols: 20,
            frames_per_symbol: 4,
            frame_jitter: 0,
            mel_bins: 16,
            noise_std: 0.02,
            seed: 1,
            count: 64,
        }
    }
}

/// Hard ceiling on total generated scalars, to catch runaway specs.
const MAX_DATASET_SCALARS: u128 = 1 << 31;

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.mel_bins == 0 || self.count == 0 {
            return Err(FeatherError::Config(
                "vocab_size, mel_bins and count must be positive".into(),
            ));
        }
        if self.min_symbols == 0 || self.min_symbols > self.max_symbols {
            return Err(FeatherError::Config(format!(
                "symbol range [{}, {}] is invalid",
                self.min_symbols, self.max_symbols
            )));
        }
        if self.frames_per_symbol == 0 || self.frame_jitter >= self.frames_per_symbol {
            return Err(FeatherError::Config(format!(
                "frames_per_symbol {} with jitter {} could leave a symbol without frames",
                self.frames_per_symbol, self.frame_jitter
            )));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(FeatherError::Config(format!(
                "noise_std {} must be finite and non-negative",
                self.noise_std
            )));
        }
        let worst = self.count as u128
            * self.max_symbols as u128
            * (self.frames_per_symbol + self.frame_jitter) as u128
            * self.mel_bins as u128;
        if worst > MAX_DATASET_SCALARS {
            return Err(FeatherError::Config(format!(
                "spec would generate {worst} scalars (limit {MAX_DATASET_SCALARS})"
            )));
        }
        Ok(())
    }
}

/// One generated utterance: symbol ids and their target frames.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub ids: Vec<usize>,
    /// `[T x mel_bins]` target frames.
    pub frames: Tensor<f32>,
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub spec: ToyTaskSpec,
    pub utterances: Vec<Utterance>,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seed for utterance `index`, decorrelated from the prototype stream.
fn utterance_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_add((index + 1).wrapping_mul(GOLDEN))
}

/// The fixed per-symbol prototype frames, uniform in [-1, 1].
pub fn prototype_table(spec: &ToyTaskSpec) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dist = Uniform::new_inclusive(-1.0f64, 1.0);
    let data = (0..spec.vocab_size * spec.mel_bins)
        .map(|_| dist.sample(&mut rng) as f32)
        .collect();
    Tensor::new(vec![spec.vocab_size, spec.mel_bins], data)
        .expect("prototype table is finite by construction")
}

fn generate_utterance(spec: &ToyTaskSpec, prototypes: &Tensor<f32>, index: u64) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(utterance_seed(spec.seed, index));
    let j = rng.gen_range(spec.min_symbols..=spec.max_symbols);
    let ids: Vec<usize> = (0..j).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
    let mut frames = Vec::new();
    for &id in &ids {
        let len = if spec.frame_jitter == 0 {
            spec.frames_per_symbol
        } else {
            spec.frames_per_symbol - spec.frame_jitter
                + rng.gen_range(0..=2 * spec.frame_jitter)
        };
        for _ in 0..len {
            for b in 0..spec.mel_bins {
                frames.push(prototypes.at2(id, b) + noise.sample(&mut rng) as f32);
            }
        }
    }
    let rows = frames.len() / spec.mel_bins;
    Utterance {
        ids,
        frames: Tensor::new(vec![rows, spec.mel_bins], frames)
            .expect("generated frames are finite"),
    }
}

/// Generate the corpus, splitting utterances across `threads` workers.
/// Output is identical for every thread count.
pub fn generate_with_threads(spec: &ToyTaskSpec, threads: usize) -> Result<ToyDataset> {
    spec.validate()?;
    if threads == 0 {
        return Err(FeatherError::Config("thread count must be positive".into()));
    }
    let prototypes = prototype_table(spec);
    let utterances = if threads == 1 || spec.count == 1 {
        (0..spec.count as u64)
            .map(|u| generate_utterance(spec, &prototypes, u))
            .collect()
    } else {
        let workers = threads.min(spec.count);
        let chunk = spec.count.div_ceil(workers);
        let mut parts: Vec<Vec<Utterance>> = Vec::with_capacity(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let lo = w * chunk;
                    let hi = ((w + 1) * chunk).min(spec.count);
                    let prototypes = &prototypes;
                    scope.spawn(move || {
                        (lo as u64..hi as u64)
                            .map(|u| generate_utterance(spec, prototypes, u))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                parts.push(h.join().expect("generation worker panicked"));
            }
        });
        parts.into_iter().flatten().collect()
    };
    Ok(ToyDataset {
        spec: spec.clone(),
        utterances,
    })
}

/// Worker count from `FEATHER_THREADS` (absent or empty means 1).
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("FEATHER_THREADS") {
        Err(_) => Ok(1),
        Ok(s) if s.trim().is_empty() => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(FeatherError::Config(format!(
                "FEATHER_THREADS must be a positive integer, got `{s}`"
            ))),
        },
    }
}

/// Generate the corpus with the `FEATHER_THREADS` worker count.
pub fn generate(spec: &ToyTaskSpec) -> Result<ToyDataset> {
    generate_with_threads(spec, threads_from_env()?)
}

/// Degenerate input families probing alignment failure modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StressKind {
    /// 1-3 symbols; the shortest inputs a model can see.
    VeryShort,
    /// 10x the longest training utterance.
    VeryLong,
    /// One symbol id repeated for the whole utterance.
    RepeatedSymbol,
}

impl StressKind {
    pub const ALL: [StressKind; 3] = [
        StressKind::VeryShort,
        StressKind::VeryLong,
        StressKind::RepeatedSymbol,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StressKind::VeryShort => "very_short",
            StressKind::VeryLong => "very_long",
            StressKind::RepeatedSymbol => "repeated_symbol",
        }
    }

    fn salt(&self) -> u64 {
        match self {
            StressKind::VeryShort => 0x5348_4f52_54,
            StressKind::VeryLong => 0x4c4f_4e47,
            StressKind::RepeatedSymbol => 0x5250_5431,
        }
    }
}

impl FromStr for StressKind {
    type Err = FeatherError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "very_short" => Ok(StressKind::VeryShort),
            "very_long" => Ok(StressKind::VeryLong),
            "repeated_symbol" => Ok(StressKind::RepeatedSymbol),
            other => Err(FeatherError::Config(format!(
                "unknown stress kind `{other}` (very_short, very_long, repeated_symbol)"
            ))),
        }
    }
}

/// Symbol-id inputs for one stress family, deterministic per spec.
///
/// `very_short` cycles lengths 1, 2, 3 so length 1 always appears.
pub fn stress_suite(kind: StressKind, spec: &ToyTaskSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let long_j = spec
        .max_symbols
        .checked_mul(10)
        .ok_or_else(|| FeatherError::Config("very_long length overflows".into()))?;
    let mut inputs = Vec::with_capacity(spec.count);
    for u in 0..spec.count as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(utterance_seed(spec.seed ^ kind.salt(), u));
        let j = match kind {
            StressKind::VeryShort => 1 + (u as usize % 3),
            StressKind::VeryLong => long_j,
            StressKind::RepeatedSymbol => rng.gen_range(spec.min_symbols..=spec.max_symbols),
        };
        let ids = match kind {
            StressKind::RepeatedSymbol => vec![rng.gen_range(0..spec.vocab_size); j],
            _ => (0..j).map(|_| rng.gen_range(0..spec.vocab_size)).collect(),
        };
        inputs.push(ids);
    }
    Ok(inputs)
}

impl ToyDataset {
    /// Cast utterances into training examples.
    pub fn examples<F: Scalar>(&self) -> Vec<TrainExample<F>> {
        self.utterances
            .iter()
            .map(|u| TrainExample {
                ids: u.ids.clone(),
                mel: u.frames.cast(),
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.utterances.len());
        for u in &self.utterances {
            let ids_offset = blob.len() as u64;
            for &id in &u.ids {
                blob.extend_from_slice(&(id as u32).to_le_bytes());
            }
            let frames_offset = blob.len() as u64;
            for v in u.frames.iter() {
                v.write_le(&mut blob);
            }
            entries.push(UtteranceEntry {
                ids_offset,
                symbols: u.ids.len() as u64,
                frames_offset,
                frames: u.frames.rows() as u64,
            });
        }
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.to_string(),
            spec: self.spec.clone(),
            utterances: entries,
        };
        write_container(&manifest, &blob)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, blob) = read_container::<DatasetManifest>(bytes)?;
        if manifest.format != DATASET_FORMAT {
            return Err(FeatherError::Format(format!(
                "expected a {DATASET_FORMAT} bundle, found `{}`",
                manifest.format
            )));
        }
        manifest.spec.validate()?;
        let mel = manifest.spec.mel_bins;
        let mut utterances = Vec::with_capacity(manifest.utterances.len());
        for (i, e) in manifest.utterances.iter().enumerate() {
            let ids_raw = slice_at(blob, e.ids_offset, e.symbols as usize * 4, i)?;
            let ids: Vec<usize> = ids_raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                .collect();
            if ids.iter().any(|&id| id >= manifest.spec.vocab_size) {
                return Err(FeatherError::Format(format!(
                    "utterance {i} holds an id outside vocab {}",
                    manifest.spec.vocab_size
                )));
            }
            let frames_raw = slice_at(blob, e.frames_offset, e.frames as usize * mel * 4, i)?;
            let data: Vec<f32> = frames_raw.chunks_exact(4).map(f32::read_le).collect();
            utterances.push(Utterance {
                ids,
                frames: Tensor::new(vec![e.frames as usize, mel], data)?,
            });
        }
        Ok(ToyDataset {
            spec: manifest.spec,
            utterances,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const DATASET_FORMAT: &str = "feather-dataset";

#[derive(Debug, Serialize, Deserialize)]
struct UtteranceEntry {
    ids_offset: u64,
    symbols: u64,
    frames_offset: u64,
    frames: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    spec: ToyTaskSpec,
    utterances: Vec<UtteranceEntry>,
}

fn slice_at(blob: &[u8], offset: u64, bytes: usize, utterance: usize) -> Result<&[u8]> {
    let start = offset as usize;
    let end = start
        .checked_add(bytes)
        .filter(|&e| e <= blob.len())
        .ok_or_else(|| {
            FeatherError::Format(format!("utterance {utterance} points outside the blob"))
        })?;
    Ok(&blob[start..end])
}
