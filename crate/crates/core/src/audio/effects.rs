//! Simple waveform augmentations used by the embedding-linearity analysis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Waveform;
use crate::error::{invalid, Result};

/// Scales by `db` decibels, clamping to [-1, 1].
pub fn gain_db(w: &Waveform, db: f64) -> Result<Waveform> {
    let g = 10f64.powf(db / 20.0) as f32;
    Waveform::new(
        w.samples()
            .iter()
            .map(|&s| (s * g).clamp(-1.0, 1.0))
            .collect(),
        w.sample_rate(),
    )
}

/// Adds white noise at `snr_db` below the signal RMS.
pub fn add_noise(w: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform> {
    let x = w.samples();
    let rms = (x.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / x.len().max(1) as f64).sqrt();
    let sigma = rms * 10f64.powf(-snr_db / 20.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new(
        x.iter()
            .map(|&s| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (s as f64 + sigma * z).clamp(-1.0, 1.0) as f32
            })
            .collect(),
        w.sample_rate(),
    )
}

fn rc_alpha(cutoff_hz: f64, sample_rate: u32) -> Result<(f64, f64)> {
    if !(cutoff_hz > 0.0) || cutoff_hz >= sample_rate as f64 / 2.0 {
        return Err(invalid(format!(
            "cutoff {cutoff_hz} Hz outside (0, Nyquist)"
        )));
    }
    let dt = 1.0 / sample_rate as f64;
    let rc = 1.0 / (std::f64::consts::TAU * cutoff_hz);
    Ok((rc, dt))
}

/// First-order RC low-pass.
pub fn lowpass(w: &Waveform, cutoff_hz: f64) -> Result<Waveform> {
    let (rc, dt) = rc_alpha(cutoff_hz, w.sample_rate())?;
    let alpha = dt / (rc + dt);
    let mut y = 0.0f64;
    Waveform::new(
        w.samples()
            .iter()
            .map(|&x| {
                y += alpha * (x as f64 - y);
                y as f32
            })
            .collect(),
        w.sample_rate(),
    )
}

/// First-order RC high-pass.
pub fn highpass(w: &Waveform, cutoff_hz: f64) -> Result<Waveform> {
    let (rc, dt) = rc_alpha(cutoff_hz, w.sample_rate())?;
    let beta = rc / (rc + dt);
    let mut y = 0.0f64;
    let mut prev = 0.0f64;
    Waveform::new(
        w.samples()
            .iter()
            .map(|&x| {
                y = beta * (y + x as f64 - prev);
                prev = x as f64;
                y as f32
            })
            .collect(),
        w.sample_rate(),
    )
}
