//! Vertical patch tokens, token masking and the transformer encoder.

mod cache;
mod frozen;
mod model;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub use cache::{read_feature_cache, write_feature_cache, FeatureCache};
pub use frozen::{window_starts, EncoderCheckpoint, FrozenEncoder, ENCODER_KIND};
pub use model::{sincos_position, Encoder};

pub const EMBED_DIM: usize = 384;
pub const PATCH_FRAMES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub n_mels: usize,
    pub patch_frames: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: EMBED_DIM,
            depth: 4,
            heads: 6,
            mlp_dim: 4 * EMBED_DIM,
            n_mels: 128,
            patch_frames: PATCH_FRAMES,
        }
    }
}

impl EncoderConfig {
    /// ViT-S depth.
    pub fn reference() -> Self {
        EncoderConfig {
            depth: 12,
            ..Self::default()
        }
    }

    pub fn with_depth(depth: usize) -> Self {
        EncoderConfig {
            depth,
            ..Self::default()
        }
    }

    pub fn token_dim(&self) -> usize {
        self.n_mels * self.patch_frames
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::Config(
                "embed_dim must be even for sincos positions".into(),
            ));
        }
        if self.mlp_dim == 0 || self.n_mels == 0 || self.patch_frames == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Patch tokens `[n_tokens × token_dim]` with the original time index of each.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Vec<f32>,
    token_dim: usize,
    positions: Vec<usize>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<f32>, token_dim: usize, positions: Vec<usize>) -> Result<Self> {
        if positions.is_empty() {
            return Err(invalid("token sequence must be non-empty"));
        }
        if token_dim == 0 || tokens.len() != positions.len() * token_dim {
            return Err(invalid(format!(
                "{} values do not form {} tokens of width {token_dim}",
                tokens.len(),
                positions.len()
            )));
        }
        if positions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("token positions must be strictly increasing"));
        }
        Ok(TokenSequence {
            tokens,
            token_dim,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn tokens(&self) -> &[f32] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.token_dim..(i + 1) * self.token_dim]
    }
}

/// Splits a spectrogram into non-overlapping `n_mels × 2` slices. Token `t` holds
/// column `2t` followed by column `2t + 1`; an odd trailing frame is dropped.
pub fn patchify(m: &MelSpectrogram, n_mels: usize) -> Result<TokenSequence> {
    if m.n_mels() != n_mels {
        return Err(invalid(format!(
            "spectrogram has {} bands, encoder expects {n_mels}",
            m.n_mels()
        )));
    }
    let n = m.n_frames() / PATCH_FRAMES;
    if n == 0 {
        return Err(invalid(format!(
            "need at least {PATCH_FRAMES} frames, got {}",
            m.n_frames()
        )));
    }
    let dim = n_mels * PATCH_FRAMES;
    let mut tokens = vec![0.0f32; n * dim];
    for t in 0..n {
        for f in 0..PATCH_FRAMES {
            let frame = t * PATCH_FRAMES + f;
            let dst = &mut tokens[t * dim + f * n_mels..t * dim + (f + 1) * n_mels];
            for (b, d) in dst.iter_mut().enumerate() {
                *d = m.get(b, frame);
            }
        }
    }
    TokenSequence::new(tokens, dim, (0..n).collect())
}

/// Number of tokens kept at `mask_ratio`: `ceil((1 − ratio)·n)`.
pub fn survivors(n: usize, mask_ratio: f64) -> usize {
    // guard against 0.1·96 = 9.600000000000001 style rounding in either direction
    let exact = (1.0 - mask_ratio) * n as f64;
    let rounded = exact.round();
    let k = if (exact - rounded).abs() < 1e-9 {
        rounded
    } else {
        exact.ceil()
    };
    (k as usize).min(n)
}

/// Keeps a uniformly random subset of `ceil((1 − ratio)·n)` tokens, in order.
pub fn mask_tokens(ts: &TokenSequence, mask_ratio: f64, seed: u64) -> Result<TokenSequence> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(invalid(format!("mask_ratio {mask_ratio} outside [0, 1)")));
    }
    let keep = survivors(ts.len(), mask_ratio);
    if keep == 0 {
        return Err(invalid("masking would leave no tokens"));
    }
    if keep == ts.len() {
        return Ok(ts.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, ts.len(), keep).into_vec();
    idx.sort_unstable();
    let mut tokens = Vec::with_capacity(keep * ts.token_dim);
    for &i in &idx {
        tokens.extend_from_slice(ts.token(i));
    }
    let positions = idx.iter().map(|&i| ts.positions[i]).collect();
    TokenSequence::new(tokens, ts.token_dim, positions)
}

/// Several sequences packed row-wise for one encoder pass.
#[derive(Debug, Clone)]
pub struct PackedTokens {
    pub tokens: Tensor<f32>,
    pub positions: Vec<usize>,
    pub segments: Vec<Range<usize>>,
}

impl PackedTokens {
    pub fn pack(seqs: &[&TokenSequence]) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| invalid("nothing to pack"))?;
        let dim = first.token_dim;
        let rows: usize = seqs.iter().map(|s| s.len()).sum();
        let mut data = Vec::with_capacity(rows * dim);
        let mut positions = Vec::with_capacity(rows);
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.token_dim != dim {
                return Err(invalid("sequences have different token widths"));
            }
            let start = positions.len();
            data.extend_from_slice(&s.tokens);
            positions.extend_from_slice(&s.positions);
            segments.push(start..positions.len());
        }
        Ok(PackedTokens {
            tokens: Tensor::new(vec![rows, dim], data)?,
            positions,
            segments,
        })
    }

    /// Tokens in arbitrary storage order; only used where order must not matter.
    pub fn unordered(tokens: Vec<f32>, token_dim: usize, positions: Vec<usize>) -> Result<Self> {
        let rows = positions.len();
        if rows == 0 {
            return Err(invalid("token sequence must be non-empty"));
        }
        Ok(PackedTokens {
            tokens: Tensor::new(vec![rows, token_dim], tokens)?,
            positions,
            segments: vec![0..rows],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::MelConfig;
    use proptest::prelude::*;

    fn spec(frames: usize) -> MelSpectrogram {
        let data = (0..128 * frames).map(|i| i as f32).collect();
        MelSpectrogram::from_parts(data, 128, frames, &MelConfig::default()).unwrap()
    }

    #[test]
    fn patch_counts_and_layout() {
        let ts = patchify(&spec(192), 128).unwrap();
        assert_eq!((ts.len(), ts.token_dim()), (96, 256));
        let odd = patchify(&spec(387), 128).unwrap();
        assert_eq!(odd.len(), 193);
        let m = spec(10);
        let ts = patchify(&m, 128).unwrap();
        for t in 0..5 {
            for b in 0..128 {
                assert_eq!(ts.token(t)[b], m.get(b, 2 * t));
                assert_eq!(ts.token(t)[128 + b], m.get(b, 2 * t + 1));
            }
        }
        assert!(patchify(&spec(1), 128).is_err());
        assert!(patchify(&spec(4), 64).is_err());
    }

    #[test]
    fn survivor_counts() {
        assert_eq!(survivors(96, 0.9), 10);
        assert_eq!(survivors(96, 0.0), 96);
        assert_eq!(survivors(10, 0.5), 5);
        assert_eq!(survivors(193, 0.9), 20);
    }

    #[test]
    fn masking_identity_and_variety() {
        let ts = patchify(&spec(192), 128).unwrap();
        assert_eq!(mask_tokens(&ts, 0.0, 3).unwrap(), ts);
        let a = mask_tokens(&ts, 0.9, 1).unwrap();
        let b = mask_tokens(&ts, 0.9, 2).unwrap();
        assert_eq!(a.len(), 10);
        assert_ne!(a.positions(), b.positions());
        assert_eq!(mask_tokens(&ts, 0.9, 1).unwrap(), a);
        for (i, &p) in a.positions().iter().enumerate() {
            assert_eq!(a.token(i), ts.token(p));
        }
        assert!(mask_tokens(&ts, 1.0, 1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            heads: 5,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(EncoderConfig::reference().depth, 12);
    }

    proptest! {
        #[test]
        fn token_count_formula(frames in 2usize..400) {
            prop_assert_eq!(patchify(&spec(frames), 128).unwrap().len(), frames / 2);
        }

        #[test]
        fn masked_positions_sorted_subset(n in 1usize..200, ratio in 0.0f64..0.99, seed in 0u64..1000) {
            let ts = TokenSequence::new(vec![0.0; n], 1, (0..n).collect()).unwrap();
            match mask_tokens(&ts, ratio, seed) {
                Ok(m) => {
                    prop_assert_eq!(m.len(), survivors(n, ratio));
                    prop_assert!(m.positions().windows(2).all(|w| w[0] < w[1]));
                    prop_assert!(m.positions().iter().all(|&p| p < n));
                }
                Err(_) => prop_assert_eq!(survivors(n, ratio), 0),
            }
        }
    }
}
