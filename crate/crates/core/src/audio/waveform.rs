use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(invalid(format!("sample {i} is not finite")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Copy of `start..start+len`, zero-padded past the end.
    pub fn slice_padded(&self, start: usize, len: usize) -> Waveform {
        let mut out = vec![0.0; len];
        if start < self.samples.len() {
            let end = (start + len).min(self.samples.len());
            out[..end - start].copy_from_slice(&self.samples[start..end]);
        }
        Waveform {
            samples: out,
            sample_rate: self.sample_rate,
        }
    }

    /// Linear-interpolation resampling.
    pub fn resample_linear(&self, target_rate: u32) -> Result<Waveform> {
        if target_rate == 0 {
            return Err(invalid("target sample rate must be positive"));
        }
        if target_rate == self.sample_rate || self.samples.is_empty() {
            return Ok(Waveform {
                samples: self.samples.clone(),
                sample_rate: target_rate,
            });
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let out_len = ((self.samples.len() as f64) / ratio).floor().max(1.0) as usize;
        let samples = (0..out_len)
            .map(|i| interpolate(&self.samples, i as f64 * ratio))
            .collect();
        Waveform::new(samples, target_rate)
    }
}

/// Linear interpolation at fractional position `pos`, zero beyond the end.
pub(crate) fn interpolate(x: &[f32], pos: f64) -> f32 {
    let i = pos.floor() as usize;
    let frac = (pos - i as f64) as f32;
    let a = x.get(i).copied().unwrap_or(0.0);
    let b = x.get(i + 1).copied().unwrap_or(0.0);
    a + (b - a) * frac
}

/// Reads a 16/24/32-bit integer or 32-bit float WAV, averaging channels to mono and
/// resampling to `target_rate`.
pub fn read_wav(path: &Path, target_rate: u32) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::malformed(path, "only 32-bit float WAV is supported"));
            }
            reader
                .samples::<f32>()
                .collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    Waveform::new(mono, spec.sample_rate)?.resample_linear(target_rate)
}

/// Writes 16-bit PCM mono; samples are clamped to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}
