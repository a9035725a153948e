//! Hann-windowed STFT (no centre padding) → HTK Mel filterbank → `ln(ε + power)`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::waveform::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{invalid, Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub window: usize,
    pub hop: usize,
    pub fmin: f64,
    /// Upper filter edge; `None` means Nyquist.
    pub fmax: Option<f64>,
    pub log_eps: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: DEFAULT_SAMPLE_RATE,
            n_mels: 128,
            window: 2048,
            hop: 512,
            fmin: 0.0,
            fmax: None,
            log_eps: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn fmax(&self) -> f64 {
        self.fmax.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.n_mels == 0 || self.window < 2 || self.hop == 0 {
            return Err(Error::Config("mel parameters must be positive".into()));
        }
        if !(self.fmin >= 0.0
            && self.fmin < self.fmax()
            && self.fmax() <= self.sample_rate as f64 / 2.0)
        {
            return Err(Error::Config(format!(
                "need 0 ≤ fmin < fmax ≤ Nyquist, got {}..{}",
                self.fmin,
                self.fmax()
            )));
        }
        if !(self.log_eps > 0.0) {
            return Err(Error::Config("log epsilon must be positive".into()));
        }
        Ok(())
    }

    /// `floor((len − window)/hop) + 1` for `len ≥ window`.
    pub fn n_frames(&self, len: usize) -> Option<usize> {
        (len >= self.window).then(|| (len - self.window) / self.hop + 1)
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Log-Mel energies stored band-major: `data[band * n_frames + frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    data: Vec<f32>,
    n_mels: usize,
    n_frames: usize,
    pub sample_rate: u32,
    pub hop: usize,
    pub window: usize,
}

impl MelSpectrogram {
    pub fn from_parts(
        data: Vec<f32>,
        n_mels: usize,
        n_frames: usize,
        cfg: &MelConfig,
    ) -> Result<Self> {
        if data.len() != n_mels * n_frames {
            return Err(invalid("mel data does not match dimensions"));
        }
        Ok(MelSpectrogram {
            data,
            n_mels,
            n_frames,
            sample_rate: cfg.sample_rate,
            hop: cfg.hop,
            window: cfg.window,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, band: usize, frame: usize) -> f32 {
        self.data[band * self.n_frames + frame]
    }

    pub fn frame(&self, frame: usize) -> Vec<f32> {
        (0..self.n_mels).map(|b| self.get(b, frame)).collect()
    }

    /// Band index with the largest mean energy across frames.
    pub fn loudest_band(&self) -> usize {
        let means: Vec<f64> = (0..self.n_mels)
            .map(|b| {
                self.data[b * self.n_frames..(b + 1) * self.n_frames]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
            })
            .collect();
        (0..self.n_mels)
            .max_by(|&a, &b| means[a].total_cmp(&means[b]))
            .unwrap_or(0)
    }

    /// Frames `start..start + n` as a new spectrogram.
    pub fn crop_frames(&self, start: usize, n: usize) -> Result<MelSpectrogram> {
        if n == 0 || start + n > self.n_frames {
            return Err(invalid(format!(
                "frames {start}..{} outside 0..{}",
                start + n,
                self.n_frames
            )));
        }
        let mut data = Vec::with_capacity(self.n_mels * n);
        for b in 0..self.n_mels {
            let row = b * self.n_frames;
            data.extend_from_slice(&self.data[row + start..row + start + n]);
        }
        Ok(MelSpectrogram {
            data,
            n_mels: self.n_mels,
            n_frames: n,
            sample_rate: self.sample_rate,
            hop: self.hop,
            window: self.window,
        })
    }

    pub fn normalize(&mut self, stats: &NormStats) {
        let (m, s) = (stats.mean as f32, stats.std as f32);
        self.data.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
}

/// Corpus-level mean/std of log-Mel values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats {
        mean: 0.0,
        std: 1.0,
    };

    pub fn from_spectrograms<'a>(
        specs: impl IntoIterator<Item = &'a MelSpectrogram>,
    ) -> Result<Self> {
        let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        for s in specs {
            for &v in s.data() {
                n += 1;
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
        }
        if n == 0 {
            return Err(invalid("no spectrogram values to normalise over"));
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        Ok(NormStats {
            mean,
            std: var.sqrt().max(1e-6),
        })
    }
}

struct Filter {
    first_bin: usize,
    weights: Vec<f32>,
}

/// Precomputed window, FFT plan and filterbank for one [`MelConfig`].
#[derive(Clone)]
pub struct MelFrontend {
    cfg: MelConfig,
    window: Vec<f32>,
    filters: Arc<Vec<Filter>>,
    fft: Arc<dyn Fft<f32>>,
}

impl std::fmt::Debug for MelFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontend")
            .field("cfg", &self.cfg)
            .finish()
    }
}

impl MelFrontend {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window;
        // periodic Hann
        let window = (0..n)
            .map(|i| (0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos()) as f32)
            .collect();
        let filters = Arc::new(build_filters(&cfg));
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(MelFrontend {
            cfg,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Centre frequency (Hz) of each Mel band.
    pub fn filter_centers_hz(&self) -> Vec<f64> {
        mel_points(&self.cfg)[1..=self.cfg.n_mels].to_vec()
    }

    /// Dense `(n_mels, n_bins)` weight matrix.
    pub fn filter_matrix(&self) -> Vec<Vec<f32>> {
        let bins = self.cfg.window / 2 + 1;
        self.filters
            .iter()
            .map(|f| {
                let mut row = vec![0.0; bins];
                row[f.first_bin..f.first_bin + f.weights.len()].copy_from_slice(&f.weights);
                row
            })
            .collect()
    }

    pub fn mel_spectrogram(&self, w: &Waveform) -> Result<MelSpectrogram> {
        if w.sample_rate() != self.cfg.sample_rate {
            return Err(invalid(format!(
                "waveform at {} Hz, frontend expects {} Hz",
                w.sample_rate(),
                self.cfg.sample_rate
            )));
        }
        let n_frames = self.cfg.n_frames(w.len()).ok_or(Error::TooShort {
            required: self.cfg.window,
            actual: w.len(),
        })?;
        let frames = par::map_range(n_frames, |f| self.frame_energies(w.samples(), f));
        let n_mels = self.cfg.n_mels;
        let mut data = vec![0.0f32; n_mels * n_frames];
        for (f, energies) in frames.iter().enumerate() {
            for (b, &e) in energies.iter().enumerate() {
                data[b * n_frames + f] = e;
            }
        }
        MelSpectrogram::from_parts(data, n_mels, n_frames, &self.cfg)
    }

    fn frame_energies(&self, x: &[f32], frame: usize) -> Vec<f32> {
        let n = self.cfg.window;
        let start = frame * self.cfg.hop;
        let mut buf: Vec<Complex<f32>> = x[start..start + n]
            .iter()
            .zip(&self.window)
            .map(|(&s, &w)| Complex::new(s * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        let power: Vec<f32> = buf[..n / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        let eps = self.cfg.log_eps as f32;
        self.filters
            .iter()
            .map(|f| {
                let e: f32 = f
                    .weights
                    .iter()
                    .zip(&power[f.first_bin..])
                    .map(|(w, p)| w * p)
                    .sum();
                (eps + e).ln()
            })
            .collect()
    }
}

fn mel_points(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax()));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

fn build_filters(cfg: &MelConfig) -> Vec<Filter> {
    let points = mel_points(cfg);
    let bins = cfg.window / 2 + 1;
    let bin_hz = cfg.sample_rate as f64 / cfg.window as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
            let mut dense: Vec<f32> = (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - lo) / (center - lo);
                    let down = (hi - f) / (hi - center);
                    up.min(down).max(0.0) as f32
                })
                .collect();
            if dense.iter().all(|&w| w == 0.0) {
                // filter narrower than a bin: fall back to the nearest bin
                let k = ((center / bin_hz).round() as usize).min(bins - 1);
                dense[k] = 1.0;
            }
            let first = dense.iter().position(|&w| w > 0.0).unwrap_or(0);
            let last = dense.iter().rposition(|&w| w > 0.0).unwrap_or(0);
            Filter {
                first_bin: first,
                weights: dense[first..=last].to_vec(),
            }
        })
        .collect()
}
