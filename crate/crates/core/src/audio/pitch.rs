use super::waveform::{interpolate, Waveform};
use crate::error::{invalid, Result};

pub const DEFAULT_SHIFT_BOUND: i32 = 6;

const OLA_FRAME: usize = 1024;
const OLA_HOP: usize = 512;
/// Search radius (samples) around each frame's nominal source position.
const WSOLA_TOLERANCE: i64 = 160;
const WSOLA_COARSE: usize = 4;

/// Generic-audio pitch shift: resample by `2^(-n/12)` in time, then WSOLA
/// time-stretch back to the input length. Shift 0 returns the input unchanged.
pub fn pitch_shift(w: &Waveform, semitones: i32, bound: i32) -> Result<Waveform> {
    if semitones.abs() > bound {
        return Err(invalid(format!(
            "pitch shift {semitones} outside ±{bound} semitones"
        )));
    }
    if w.is_empty() {
        return Err(invalid("cannot pitch-shift an empty waveform"));
    }
    if semitones == 0 {
        return Ok(w.clone());
    }
    let ratio = 2f64.powf(semitones as f64 / 12.0);
    let x = w.samples();
    let resampled_len = (((x.len() - 1) as f64) / ratio).floor() as usize + 1;
    let y: Vec<f32> = (0..resampled_len)
        .map(|i| interpolate(x, i as f64 * ratio))
        .collect();
    Waveform::new(stretch(&y, x.len()), w.sample_rate())
}

/// WSOLA time-stretch from `y.len()` to `target_len` samples: each frame is
/// taken near its nominal source position, at the offset whose overlap best
/// correlates with the natural continuation of the previous frame, so
/// periodic components stay phase-coherent across frames.
fn stretch(y: &[f32], target_len: usize) -> Vec<f32> {
    let window: Vec<f64> = (0..OLA_FRAME)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / OLA_FRAME as f64).cos())
        .collect();
    let at = |i: usize| y.get(i).copied().unwrap_or(0.0) as f64;
    let analysis_hop = OLA_HOP as f64 * y.len() as f64 / target_len as f64;
    let overlap = OLA_FRAME - OLA_HOP;
    let mut out = vec![0.0f64; target_len + OLA_FRAME + OLA_HOP];
    let mut norm = vec![0.0f64; target_len + OLA_FRAME + OLA_HOP];
    let frames = target_len.div_ceil(OLA_HOP) + 1;
    let mut prev = 0usize;
    for j in 0..frames {
        let nominal = (j as f64 * analysis_hop).round() as i64;
        let src = if j == 0 {
            0
        } else {
            let natural = prev + OLA_HOP;
            let score = |cand: i64| -> f64 {
                let c = cand as usize;
                (0..overlap).map(|t| at(c + t) * at(natural + t)).sum()
            };
            // coarse scan, then refine around the best coarse offset
            let lo = (nominal - WSOLA_TOLERANCE).max(0);
            let hi = nominal + WSOLA_TOLERANCE;
            let mut best = (nominal.max(0), f64::NEG_INFINITY);
            for cand in (lo..=hi).step_by(WSOLA_COARSE) {
                let s = score(cand);
                if s > best.1 {
                    best = (cand, s);
                }
            }
            let centre = best.0;
            let fine = WSOLA_COARSE as i64 - 1;
            for cand in (centre - fine).max(lo)..=(centre + fine).min(hi) {
                let s = score(cand);
                if s > best.1 {
                    best = (cand, s);
                }
            }
            best.0 as usize
        };
        let dst = j * OLA_HOP;
        for (t, &win) in window.iter().enumerate() {
            out[dst + t] += win * at(src + t);
            norm[dst + t] += win;
        }
        prev = src;
    }
    out.truncate(target_len);
    out.iter()
        .zip(&norm)
        .map(|(&v, &n)| {
            let v = if n > 1e-3 { v / n } else { v };
            v.clamp(-1.0, 1.0) as f32
        })
        .collect()
}
