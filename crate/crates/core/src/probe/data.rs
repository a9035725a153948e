use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{
    pitch_shift, read_wav, synth_shifted, SynthSpec, Waveform, DEFAULT_SHIFT_BOUND,
};
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::keyeval::Key;
use crate::par;

/// Track-variant jobs rendered and encoded together; bounds peak memory.
const EXPAND_CHUNK: usize = 64;

/// One window embedding with its (possibly transposed) label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeature {
    pub embedding: Vec<f32>,
    /// `tonic + 12·minor`.
    pub class: usize,
    pub track_id: String,
    pub window: usize,
    pub shift: i32,
}

impl LabeledFeature {
    pub fn key(&self) -> Result<Key> {
        Key::from_class_index(self.class)
    }
}

#[derive(Debug, Clone)]
pub enum TrackAudio {
    /// Re-synthesised exactly at each shift.
    Synth(SynthSpec),
    /// Loaded from disk and shifted with the generic resample + overlap-add path.
    Wav(PathBuf),
    Memory(Waveform),
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: String,
    pub key: Key,
    pub audio: TrackAudio,
}

impl Track {
    /// Audio and label after shifting by `semitones`.
    pub fn render(&self, semitones: i32, sample_rate: u32) -> Result<(Waveform, Key)> {
        let bound = DEFAULT_SHIFT_BOUND.max(semitones.abs());
        let generic = |w: Waveform| -> Result<(Waveform, Key)> {
            Ok((
                pitch_shift(&w, semitones, bound)?,
                self.key.transpose(semitones),
            ))
        };
        match &self.audio {
            TrackAudio::Synth(spec) => {
                let spec = SynthSpec {
                    key: self.key,
                    sample_rate,
                    ..spec.clone()
                };
                synth_shifted(&spec, semitones)
            }
            TrackAudio::Wav(path) => generic(read_wav(path, sample_rate)?),
            TrackAudio::Memory(w) => generic(w.resample_linear(sample_rate)?),
        }
    }
}

/// Renders and encodes `(track, shift)` jobs in bounded chunks, handing each
/// variant's window embeddings and transposed key to `sink` in job order.
pub fn for_each_variant<F>(
    tracks: &[Track],
    jobs: &[(usize, i32)],
    encoder: &FrozenEncoder,
    context_len: usize,
    mut sink: F,
) -> Result<()>
where
    F: FnMut(usize, i32, Key, Vec<Vec<f32>>) -> Result<()>,
{
    let rate = encoder.meta().mel.sample_rate;
    for (c, chunk) in jobs.chunks(EXPAND_CHUNK).enumerate() {
        let rendered = par::map(chunk, |&(t, s)| {
            tracks
                .get(t)
                .ok_or_else(|| crate::error::invalid(format!("track {t} out of range")))?
                .render(s, rate)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let (audio, keys): (Vec<Waveform>, Vec<Key>) = rendered.into_iter().unzip();
        let feats = encoder.extract_many(&audio, context_len)?;
        for ((&(t, s), key), windows) in chunk.iter().zip(keys).zip(feats) {
            sink(t, s, key, windows)?;
        }
        if (c + 1) % 20 == 0 {
            log::info!(
                "featurised {} / {} track variants",
                (c + 1) * EXPAND_CHUNK,
                jobs.len()
            );
        }
    }
    Ok(())
}

/// Featurises every track at every shift (track-major order).
pub fn expand_with_shifts(
    tracks: &[Track],
    shifts: &[i32],
    encoder: &FrozenEncoder,
    context_len: usize,
) -> Result<Vec<LabeledFeature>> {
    let jobs: Vec<(usize, i32)> = (0..tracks.len())
        .flat_map(|t| shifts.iter().map(move |&s| (t, s)))
        .collect();
    let mut out = Vec::new();
    for_each_variant(tracks, &jobs, encoder, context_len, |t, s, key, windows| {
        for (w, embedding) in windows.into_iter().enumerate() {
            out.push(LabeledFeature {
                embedding,
                class: key.class_index(),
                track_id: tracks[t].id.clone(),
                window: w,
                shift: s,
            });
        }
        Ok(())
    })?;
    Ok(out)
}

/// Windows belonging to one (track, shift) variant.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackGroup {
    pub track_id: String,
    pub shift: i32,
    pub class: usize,
    pub rows: Vec<usize>,
}

/// Groups feature rows by (track, shift) in order of first appearance.
pub fn group_windows(features: &[LabeledFeature]) -> Result<Vec<TrackGroup>> {
    let mut index: HashMap<(&str, i32), usize> = HashMap::new();
    let mut groups: Vec<TrackGroup> = Vec::new();
    for (i, f) in features.iter().enumerate() {
        let g = *index.entry((&f.track_id, f.shift)).or_insert_with(|| {
            groups.push(TrackGroup {
                track_id: f.track_id.clone(),
                shift: f.shift,
                class: f.class,
                rows: Vec::new(),
            });
            groups.len() - 1
        });
        if groups[g].class != f.class {
            return Err(Error::malformed(
                "features",
                format!("track {} has windows with different labels", f.track_id),
            ));
        }
        groups[g].rows.push(i);
    }
    Ok(groups)
}

/// Deterministically holds out `ceil(fraction·n)` of the distinct ids (at least one
/// when there are two or more). Returns `(train, held_out)`, each sorted.
pub fn split_track_ids(ids: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut unique: Vec<String> = ids
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let n = unique.len();
    let mut k = ((fraction * n as f64).ceil() as usize).min(n);
    if n >= 2 && fraction > 0.0 {
        k = k.clamp(1, n - 1);
    }
    let mut held: Vec<String> = unique.split_off(n - k);
    unique.sort();
    held.sort();
    (unique, held)
}

/// Fails if any track id occurs in more than one split.
pub fn assert_disjoint_tracks(splits: &[&[LabeledFeature]]) -> Result<()> {
    let mut owner: HashMap<&str, usize> = HashMap::new();
    for (s, split) in splits.iter().enumerate() {
        let ids: HashSet<&str> = split.iter().map(|f| f.track_id.as_str()).collect();
        for id in ids {
            if let Some(&prev) = owner.get(id) {
                if prev != s {
                    return Err(Error::TrackLeakage(id.to_string()));
                }
            }
            owner.insert(id, s);
        }
    }
    Ok(())
}
