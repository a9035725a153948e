//! NT-Xent objective, masked two-view pairs and the pretraining loop.

mod corpus;
mod pretrain;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{MelConfig, MelFrontend, MelSpectrogram, NormStats, Waveform};
use crate::encoder::{mask_tokens, patchify, TokenSequence};
use crate::error::{invalid, Error, Result};
use crate::seed;

pub use corpus::{ClipSource, SynthCorpus, WavCorpus};
pub use pretrain::{compute_norm_stats, pretrain, PretrainRun, Projector};

/// Cosine similarity; errors on a zero vector.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid("cosine_sim needs equal-length vectors"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("cosine similarity of a zero vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `2N` embeddings ordered `(a₁, b₁, a₂, b₂, …)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    z: Vec<Vec<f64>>,
}

impl ContrastiveBatch {
    pub fn new(z: Vec<Vec<f64>>) -> Result<Self> {
        if z.is_empty() || z.len() % 2 != 0 {
            return Err(invalid(format!(
                "need an even, non-zero number of embeddings, got {}",
                z.len()
            )));
        }
        let d = z[0].len();
        for (i, v) in z.iter().enumerate() {
            if v.len() != d {
                return Err(invalid("embeddings have different widths"));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    op: "contrastive_batch",
                });
            }
            if v.iter().all(|&x| x == 0.0) {
                return Err(invalid(format!("embedding {i} is zero")));
            }
        }
        Ok(ContrastiveBatch { z })
    }

    /// Interleaves two views: `a[i]` and `b[i]` become rows `2i` and `2i + 1`.
    pub fn from_views(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(invalid("view lists differ in length"));
        }
        Self::new(
            a.iter()
                .zip(b)
                .flat_map(|(x, y)| [x.clone(), y.clone()])
                .collect(),
        )
    }

    pub fn pairs(&self) -> usize {
        self.z.len() / 2
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.z
    }
}

/// Mean over all `2N` anchors of `−log(exp(s_ij/τ) / Σ_{k≠i} exp(s_ik/τ))`, in f64.
pub fn ntxent_loss(batch: &ContrastiveBatch, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    let m = batch.z.len();
    let unit: Vec<Vec<f64>> = batch
        .z
        .iter()
        .map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    let mut total = 0.0;
    for i in 0..m {
        let sims: Vec<(usize, f64)> = (0..m)
            .filter(|&k| k != i)
            .map(|k| {
                (
                    k,
                    unit[i]
                        .iter()
                        .zip(&unit[k])
                        .map(|(x, y)| x * y)
                        .sum::<f64>()
                        / tau,
                )
            })
            .collect();
        let max = sims.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + sims.iter().map(|s| (s.1 - max).exp()).sum::<f64>().ln();
        let pos = sims
            .iter()
            .find(|s| s.0 == i ^ 1)
            .expect("partner present")
            .1;
        total += lse - pos;
    }
    Ok(total / m as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub temperature: f64,
    pub mask_ratio: f64,
    /// Clips per step (`N`); each contributes two views.
    pub batch_size: usize,
    pub steps: usize,
    /// Crop length in samples.
    pub clip_length: usize,
    pub projector_dim: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Steps between in-memory snapshots used as the fallback on divergence.
    pub snapshot_every: usize,
    /// Prepared batches buffered ahead of the optimizer.
    pub queue_depth: usize,
    /// Clips used to estimate spectrogram normalisation.
    pub norm_clips: usize,
    /// Keep each clip's full spectrogram in memory after first use.
    pub cache_spectrograms: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            temperature: 0.1,
            mask_ratio: 0.9,
            batch_size: 16,
            steps: 1000,
            clip_length: 100_000,
            projector_dim: 128,
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            warmup_steps: 0,
            seed: 0,
            snapshot_every: 100,
            queue_depth: 2,
            norm_clips: 64,
            cache_spectrograms: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 clips".into()));
        }
        if self.clip_length == 0 || self.projector_dim == 0 || self.queue_depth == 0 {
            return Err(Error::Config(
                "clip_length, projector_dim and queue_depth must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "need learning_rate > 0 and weight_decay ≥ 0".into(),
            ));
        }
        Ok(())
    }
}

/// One random hop-aligned crop of `clip_length` samples → log-Mel → patches →
/// two independently masked views.
pub fn make_views(
    clip: &Waveform,
    frontend: &MelFrontend,
    norm: &NormStats,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(TokenSequence, TokenSequence)> {
    if clip.len() < cfg.clip_length {
        return Err(Error::TooShort {
            required: cfg.clip_length,
            actual: clip.len(),
        });
    }
    let full = frontend.mel_spectrogram(clip)?;
    views_from_mel(&full, frontend.config(), norm, cfg, seed)
}

/// Same as [`make_views`] but starting from the spectrogram of the whole clip.
/// Frames of a hop-aligned audio crop equal the matching frames of the full
/// spectrogram, so the two paths agree exactly.
pub fn views_from_mel(
    full: &MelSpectrogram,
    mel: &MelConfig,
    norm: &NormStats,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(TokenSequence, TokenSequence)> {
    let crop_frames = mel.n_frames(cfg.clip_length).ok_or(Error::TooShort {
        required: mel.window,
        actual: cfg.clip_length,
    })?;
    if full.n_frames() < crop_frames {
        return Err(Error::TooShort {
            required: cfg.clip_length,
            actual: (full.n_frames() - 1) * mel.hop + mel.window,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0..=full.n_frames() - crop_frames);
    let mut crop = full.crop_frames(start, crop_frames)?;
    crop.normalize(norm);
    let tokens = patchify(&crop, mel.n_mels)?;
    let a = mask_tokens(&tokens, cfg.mask_ratio, seed::mix(seed, &[1]))?;
    let b = mask_tokens(&tokens, cfg.mask_ratio, seed::mix(seed, &[2]))?;
    Ok((a, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    /// Mean cosine similarity between the two views of each clip.
    pub pos_cos: f64,
}

pub fn write_loss_csv(path: &Path, curve: &[LossPoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss,pos_cos")?;
    for p in curve {
        writeln!(f, "{},{},{}", p.step, p.loss, p.pos_cos)?;
    }
    f.flush()?;
    Ok(())
}

/// Mean loss over the first (or last) `window` points of a curve.
pub fn trailing_mean(curve: &[LossPoint], window: usize, from_end: bool) -> f64 {
    let w = window.min(curve.len()).max(1);
    let slice = if from_end {
        &curve[curve.len().saturating_sub(w)..]
    } else {
        &curve[..w.min(curve.len())]
    };
    slice.iter().map(|p| p.loss).sum::<f64>() / slice.len().max(1) as f64
}
