use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{patchify, Encoder, EncoderConfig, PackedTokens, TokenSequence};
use crate::audio::{MelConfig, MelFrontend, NormStats, Waveform};
use crate::error::{invalid, Error, Result};
use crate::par;
use crate::tensor::checkpoint::{load_checkpoint, save_checkpoint};
use crate::tensor::{Graph, ParamStore};

pub const ENCODER_KIND: &str = "encoder";

/// Sequences per forward pass during extraction.
const EVAL_BATCH: usize = 32;

/// Metadata stored next to encoder weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderCheckpoint {
    pub encoder: EncoderConfig,
    pub mel: MelConfig,
    pub norm: NormStats,
    /// Snapshot of the configuration that produced the weights, if any.
    #[serde(default)]
    pub pretrain: Option<serde_json::Value>,
    #[serde(default)]
    pub step: usize,
}

/// Eval-mode encoder with its frontend and normalisation; shareable across threads.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    meta: EncoderCheckpoint,
    store: ParamStore<f32>,
    encoder: Encoder,
    frontend: MelFrontend,
}

/// Window offsets for `len` samples: full windows, plus a zero-padded tail kept
/// iff it is at least half a window.
pub fn window_starts(len: usize, context: usize) -> Result<Vec<usize>> {
    if context == 0 {
        return Err(invalid("context length must be positive"));
    }
    if len < context {
        return Err(Error::TooShort {
            required: context,
            actual: len,
        });
    }
    let mut n = len / context;
    if 2 * (len % context) >= context {
        n += 1;
    }
    Ok((0..n).map(|i| i * context).collect())
}

impl FrozenEncoder {
    pub fn new(meta: EncoderCheckpoint, store: ParamStore<f32>) -> Result<Self> {
        if meta.mel.n_mels != meta.encoder.n_mels {
            return Err(Error::CheckpointMismatch(format!(
                "frontend has {} bands, encoder expects {}",
                meta.mel.n_mels, meta.encoder.n_mels
            )));
        }
        let encoder = Encoder::bind(&meta.encoder, &store)?;
        let frontend = MelFrontend::new(meta.mel.clone())?;
        Ok(FrozenEncoder {
            meta,
            store,
            encoder,
            frontend,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, store) = load_checkpoint::<EncoderCheckpoint>(dir, ENCODER_KIND)?;
        Self::new(meta, store)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, ENCODER_KIND, &self.meta, &self.store, "encoder.")
    }

    pub fn meta(&self) -> &EncoderCheckpoint {
        &self.meta
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.meta.encoder
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn frontend(&self) -> &MelFrontend {
        &self.frontend
    }

    /// Errors if audio prepared with `mel` would not match this checkpoint.
    pub fn check_frontend(&self, mel: &MelConfig) -> Result<()> {
        if mel.sample_rate != self.meta.mel.sample_rate || mel.n_mels != self.meta.mel.n_mels {
            return Err(Error::CheckpointMismatch(format!(
                "frontend {} Hz / {} bands, checkpoint {} Hz / {} bands",
                mel.sample_rate, mel.n_mels, self.meta.mel.sample_rate, self.meta.mel.n_mels
            )));
        }
        Ok(())
    }

    /// Normalised log-Mel → vertical patches.
    pub fn tokens(&self, w: &Waveform) -> Result<TokenSequence> {
        let mut m = self.frontend.mel_spectrogram(w)?;
        m.normalize(&self.meta.norm);
        patchify(&m, self.meta.encoder.n_mels)
    }

    pub fn encode_packed(&self, batch: &PackedTokens) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new(&self.store, false);
        let out = self.encoder.forward(&mut g, batch)?;
        let v = g.value(out);
        Ok((0..v.rows()).map(|r| v.row(r).to_vec()).collect())
    }

    pub fn encode(&self, ts: &TokenSequence) -> Result<Vec<f32>> {
        Ok(self.encode_packed(&PackedTokens::pack(&[ts])?)?.remove(0))
    }

    /// Order-preserving batched encoding.
    pub fn encode_batch(&self, seqs: &[TokenSequence]) -> Result<Vec<Vec<f32>>> {
        let chunks: Vec<&[TokenSequence]> = seqs.chunks(EVAL_BATCH).collect();
        let parts = par::map(&chunks, |chunk| {
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            self.encode_packed(&PackedTokens::pack(&refs)?)
        });
        let mut out = Vec::with_capacity(seqs.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// One embedding per context window of `w`.
    pub fn extract_features(&self, w: &Waveform, context_len: usize) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .extract_many(std::slice::from_ref(w), context_len)?
            .remove(0))
    }

    /// Windows every clip, encodes all windows in shared batches and regroups per clip.
    pub fn extract_many(
        &self,
        clips: &[Waveform],
        context_len: usize,
    ) -> Result<Vec<Vec<Vec<f32>>>> {
        let mut counts = Vec::with_capacity(clips.len());
        let mut jobs = Vec::new();
        for (c, w) in clips.iter().enumerate() {
            let starts = window_starts(w.len(), context_len)?;
            counts.push(starts.len());
            jobs.extend(starts.into_iter().map(|s| (c, s)));
        }
        let tokens = par::map(&jobs, |&(c, s)| {
            let window = clips[c].slice_padded(s, context_len);
            self.tokens(&window)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut embeddings = self.encode_batch(&tokens)?.into_iter();
        Ok(counts
            .into_iter()
            .map(|n| embeddings.by_ref().take(n).collect())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windowing_rule() {
        assert_eq!(window_starts(300_000, 100_000).unwrap().len(), 3);
        assert_eq!(
            window_starts(250_000, 100_000).unwrap(),
            vec![0, 100_000, 200_000]
        );
        assert_eq!(window_starts(230_000, 100_000).unwrap().len(), 2);
        assert_eq!(window_starts(100_000, 100_000).unwrap().len(), 1);
        assert!(matches!(
            window_starts(99_999, 100_000),
            Err(Error::TooShort {
                required: 100_000,
                actual: 99_999
            })
        ));
    }
}
