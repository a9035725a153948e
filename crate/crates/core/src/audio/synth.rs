//! Keyed synthetic music: I/IV/V triad progressions with a root bass line and a
//! scale-tone melody, rendered as decaying harmonic-series notes plus white noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::waveform::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{invalid, Result};
use crate::keyeval::{Key, Mode};

/// Output peak after normalisation; leaves 6 dB of headroom for gain augmentation.
pub const SYNTH_PEAK: f32 = 0.45;

const MAJOR_SCALE: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
/// Harmonic minor, so the dominant chord carries the raised leading tone.
const MINOR_SCALE: [i32; 7] = [0, 2, 3, 5, 7, 8, 11];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub key: Key,
    pub duration_s: f64,
    pub harmonics: usize,
    pub seed: u64,
    pub tempo_bpm: f64,
    /// Noise floor relative to the signal RMS, in dB; `-inf` disables noise.
    pub noise_db: f64,
    pub sample_rate: u32,
}

impl SynthSpec {
    pub fn new(key: Key, duration_s: f64, seed: u64) -> Self {
        SynthSpec {
            key,
            duration_s,
            harmonics: 4,
            seed,
            tempo_bpm: 100.0,
            noise_db: -30.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(invalid("duration must be positive"));
        }
        if self.harmonics == 0 {
            return Err(invalid("need at least one harmonic"));
        }
        if !(self.tempo_bpm > 0.0) || self.sample_rate == 0 {
            return Err(invalid("tempo and sample rate must be positive"));
        }
        let beat = 60.0 / self.tempo_bpm;
        if self.duration_s < beat {
            return Err(invalid(format!(
                "duration {:.3}s is shorter than one note ({beat:.3}s at {} bpm)",
                self.duration_s, self.tempo_bpm
            )));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

/// A clip of `key` with randomised harmonics, tempo and noise floor.
pub fn random_spec(key: Key, duration_s: f64, seed: u64) -> SynthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = SynthSpec::new(key, duration_s, rng.random());
    spec.harmonics = rng.random_range(2..=6);
    spec.tempo_bpm = rng.random_range(80.0..140.0);
    spec.noise_db = rng.random_range(-40.0..-20.0);
    spec
}

/// Scale intervals (semitones above the tonic) used for `mode`.
pub fn scale_intervals(mode: Mode) -> [i32; 7] {
    match mode {
        Mode::Major => MAJOR_SCALE,
        Mode::Minor => MINOR_SCALE,
    }
}

/// Pitch classes that can sound in a clip of `key`.
pub fn scale_pitch_classes(key: Key) -> Vec<u8> {
    scale_intervals(key.mode())
        .iter()
        .map(|&i| ((key.tonic() as i32 + i).rem_euclid(12)) as u8)
        .collect()
}

fn triads(mode: Mode) -> [[i32; 3]; 3] {
    match mode {
        Mode::Major => [[0, 4, 7], [5, 9, 12], [7, 11, 14]],
        Mode::Minor => [[0, 3, 7], [5, 8, 12], [7, 11, 14]],
    }
}

pub fn midi_to_hz(midi: f64) -> f64 {
    440.0 * 2f64.powf((midi - 69.0) / 12.0)
}

struct Note {
    start: usize,
    len: usize,
    midi: f64,
    gain: f64,
    decay: f64,
}

/// Deterministic clip for `spec.key`.
pub fn synth_clip(spec: &SynthSpec) -> Result<Waveform> {
    render(spec, 0)
}

/// Re-synthesises the clip with every fundamental scaled by `2^(semitones/12)`;
/// the random score is unchanged, so the label moves with the audio.
pub fn synth_shifted(spec: &SynthSpec, semitones: i32) -> Result<(Waveform, Key)> {
    Ok((render(spec, semitones)?, spec.key.transpose(semitones)))
}

fn render(spec: &SynthSpec, semitones: i32) -> Result<Waveform> {
    spec.validate()?;
    let sr = spec.sample_rate as f64;
    let n = spec.num_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mode = spec.key.mode();
    let scale = scale_intervals(mode);
    let chords = triads(mode);
    // chord register: tonic between A3 and G#4
    let root = 57 + (spec.key.tonic() as i32 - 9).rem_euclid(12);
    let beat_s = 60.0 / spec.tempo_bpm;

    let mut notes = Vec::new();
    let mut t = 0.0f64;
    let mut bar = 0usize;
    while t < spec.duration_s {
        let bar_s = 4.0 * beat_s * (1.0 + rng.random_range(-0.05..0.05));
        let degree = if bar == 0 {
            0
        } else {
            match rng.random::<f64>() {
                x if x < 0.5 => 0,
                x if x < 0.75 => 1,
                _ => 2,
            }
        };
        let chord = chords[degree];
        let at = |s: f64| (s * sr).round() as usize;
        let bar_start = at(t);
        let bar_len = at(bar_s).max(1);
        notes.push(Note {
            start: bar_start,
            len: bar_len,
            midi: (root + chord[0] - 12) as f64,
            gain: 0.5 * rng.random_range(0.8..1.0),
            decay: rng.random_range(0.3..1.5),
        });
        for &iv in &chord {
            notes.push(Note {
                start: bar_start,
                len: bar_len,
                midi: (root + iv) as f64,
                gain: 0.3 * rng.random_range(0.7..1.0),
                decay: rng.random_range(0.3..1.5),
            });
        }
        let slot = bar_s / 4.0;
        for b in 0..4 {
            let onset = t + b as f64 * slot + rng.random_range(-0.01..0.01);
            let dur = slot * rng.random_range(0.6..1.0);
            let pick = if rng.random::<f64>() < 0.5 {
                chord[rng.random_range(0..3)]
            } else {
                scale[rng.random_range(0..7)]
            };
            notes.push(Note {
                start: at(onset.max(0.0)),
                len: at(dur).max(1),
                midi: (root + 12 + pick.rem_euclid(12)) as f64,
                gain: 0.35 * rng.random_range(0.6..1.0),
                decay: rng.random_range(1.0..4.0),
            });
        }
        t += bar_s;
        bar += 1;
    }

    // quiet tonic-triad pad under the whole clip
    for &iv in &chords[0] {
        notes.push(Note {
            start: 0,
            len: n,
            midi: (root + iv) as f64,
            gain: 0.15 * rng.random_range(0.8..1.0),
            decay: rng.random_range(0.02..0.1),
        });
    }

    let nyquist = sr / 2.0;
    let mut mix = vec![0.0f64; n];
    let attack = (0.01 * sr) as usize;
    let release = (0.03 * sr) as usize;
    for note in &notes {
        // draw every partial's parameters so the stream is shift-independent
        let partials: Vec<(f64, f64)> = (1..=spec.harmonics)
            .map(|h| {
                let amp = rng.random_range(0.7..1.0) / h as f64;
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (amp, phase)
            })
            .collect();
        if note.start >= n {
            continue;
        }
        let len = note.len.min(n - note.start);
        let env: Vec<f64> = (0..len)
            .map(|i| {
                let a = if i < attack {
                    i as f64 / attack as f64
                } else {
                    1.0
                };
                let r = if i + release > len {
                    (len - i) as f64 / release as f64
                } else {
                    1.0
                };
                note.gain * a * r * (-note.decay * i as f64 / sr).exp()
            })
            .collect();
        let f0 = midi_to_hz(note.midi + semitones as f64);
        for (h, &(amp, phase)) in partials.iter().enumerate() {
            let f = f0 * (h + 1) as f64;
            if f >= nyquist * 0.95 {
                continue;
            }
            let w = std::f64::consts::TAU * f / sr;
            let (step_s, step_c) = w.sin_cos();
            let (mut s, mut c) = phase.sin_cos();
            let out = &mut mix[note.start..note.start + len];
            for (o, &e) in out.iter_mut().zip(&env) {
                *o += amp * e * s;
                let ns = s * step_c + c * step_s;
                c = c * step_c - s * step_s;
                s = ns;
            }
        }
    }

    if spec.noise_db.is_finite() {
        let rms = (mix.iter().map(|x| x * x).sum::<f64>() / n.max(1) as f64).sqrt();
        let sigma = rms * 10f64.powf(spec.noise_db / 20.0);
        for x in mix.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x += sigma * z;
        }
    }
    let peak = mix.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let gain = if peak > 0.0 {
        SYNTH_PEAK as f64 / peak
    } else {
        0.0
    };
    Waveform::new(
        mix.into_iter().map(|x| (x * gain) as f32).collect(),
        spec.sample_rate,
    )
}
