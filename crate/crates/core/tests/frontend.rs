mod common;

use common::{chroma_energy, dft_magnitude, spec_with};
use keyscope::audio::{
    hz_to_mel, pitch_shift, synth_clip, synth_shifted, MelConfig, MelFrontend, Waveform,
    DEFAULT_SAMPLE_RATE,
};
use keyscope::keyeval::{transpose_key, Key, Mode};
use proptest::prelude::*;

fn tone(freq: f64, len: usize) -> Waveform {
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let s = (0..len)
        .map(|n| (0.5 * (std::f64::consts::TAU * freq * n as f64 / sr).sin()) as f32)
        .collect();
    Waveform::new(s, DEFAULT_SAMPLE_RATE).unwrap()
}

/// Frequency of the largest DFT magnitude on a fine grid in `[lo, hi]`.
fn peak_hz(x: &[f32], lo: f64, hi: f64, step: f64) -> f64 {
    let mut best = (lo, 0.0);
    let mut f = lo;
    while f <= hi {
        let m = dft_magnitude(x, DEFAULT_SAMPLE_RATE, f);
        if m > best.1 {
            best = (f, m);
        }
        f += step;
    }
    best.0
}

#[test]
fn c_major_clip_is_dominated_by_the_tonic_triad() {
    let w = synth_clip(&spec_with(Key::major(0), 8.0, 7)).unwrap();
    let chroma = chroma_energy(w.samples(), w.sample_rate());
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| chroma[b].total_cmp(&chroma[a]));
    let mut top: Vec<usize> = order[..3].to_vec();
    top.sort();
    assert_eq!(top, vec![0, 4, 7], "chroma {chroma:?}");
}

#[test]
fn pure_a_minor_peaks_sit_on_scale_frequencies() {
    let mut spec = spec_with(Key::minor(9), 4.0, 3);
    spec.harmonics = 1;
    spec.noise_db = f64::NEG_INFINITY;
    let w = synth_clip(&spec).unwrap();
    // Hann-windowed 2048-sample frames, magnitudes averaged over the clip
    const N: usize = 2048;
    let sr = w.sample_rate() as f64;
    let bin = sr / N as f64;
    let mut mags = vec![0.0; N / 2];
    for frame in w.samples().chunks_exact(N).step_by(2) {
        let x: Vec<f32> = frame
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let h = 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / N as f64).cos();
                (v as f64 * h) as f32
            })
            .collect();
        for (k, m) in mags.iter_mut().enumerate() {
            *m += dft_magnitude(&x, w.sample_rate(), k as f64 * bin);
        }
    }
    let top = mags.iter().cloned().fold(0.0, f64::max);
    let scale = [9, 11, 0, 2, 4, 5, 8];
    let scale_freqs: Vec<f64> = (24..108)
        .filter(|m| scale.contains(&(m % 12)))
        .map(|m| 440.0 * 2f64.powf((m as f64 - 69.0) / 12.0))
        .collect();
    let mut peaks = 0;
    for k in 1..mags.len() - 1 {
        if mags[k] > 0.05 * top && mags[k] >= mags[k - 1] && mags[k] >= mags[k + 1] {
            peaks += 1;
            let f = k as f64 * bin;
            let near = scale_freqs.iter().any(|&s| (s - f).abs() <= bin);
            assert!(near, "peak at {f:.1} Hz is not an A-minor scale tone");
        }
    }
    assert!(peaks >= 3);
}

#[test]
fn synthesis_is_deterministic() {
    let spec = spec_with(Key::minor(3), 2.0, 99);
    assert_eq!(synth_clip(&spec).unwrap(), synth_clip(&spec).unwrap());
}

#[test]
fn semitone_shift_moves_a440() {
    let w = tone(440.0, 32768);
    let up = pitch_shift(&w, 1, 6).unwrap();
    assert_eq!(up.len(), w.len());
    let f = peak_hz(&up.samples()[4096..28672], 400.0, 520.0, 0.5);
    let want = 440.0 * 2f64.powf(1.0 / 12.0);
    assert!((f - want).abs() / want < 0.01, "{f} vs {want}");
}

#[test]
fn octave_shift_with_relaxed_bound() {
    let w = tone(440.0, 32768);
    assert!(pitch_shift(&w, 12, 6).is_err());
    let up = pitch_shift(&w, 12, 12).unwrap();
    let f = peak_hz(&up.samples()[4096..28672], 800.0, 960.0, 1.0);
    assert!((f - 880.0).abs() / 880.0 < 0.01, "{f}");
}

#[test]
fn zero_shift_is_identity() {
    let w = tone(300.0, 5000);
    assert_eq!(pitch_shift(&w, 0, 6).unwrap(), w);
}

#[test]
fn frame_counts_and_a440_band() {
    let fe = MelFrontend::new(MelConfig::default()).unwrap();
    assert_eq!(fe.mel_spectrogram(&tone(440.0, 100_000)).unwrap().n_frames(), 192);
    assert_eq!(fe.mel_spectrogram(&tone(440.0, 200_000)).unwrap().n_frames(), 387);
    let m = fe.mel_spectrogram(&tone(440.0, 16_000)).unwrap();
    assert_eq!(m.n_mels(), 128);
    assert!(m.data().iter().all(|v| v.is_finite()));

    // independent oracle: the band whose HTK triangle peaks closest to 440 Hz
    let top = hz_to_mel(8000.0);
    let target = hz_to_mel(440.0);
    let expected = (0..128)
        .min_by(|&a, &b| {
            let c = |i: usize| (top * (i + 1) as f64 / 129.0 - target).abs();
            c(a).total_cmp(&c(b))
        })
        .unwrap();
    assert_eq!(expected, 24);
    assert!(m.loudest_band().abs_diff(expected) <= 1);
}

#[test]
fn filterbank_centres_increase() {
    let fe = MelFrontend::new(MelConfig::default()).unwrap();
    let c = fe.filter_centers_hz();
    assert!(c.windows(2).all(|w| w[0] < w[1]));
    for row in fe.filter_matrix() {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!(row.iter().sum::<f32>() > 0.0);
    }
}

#[test]
fn short_input_reports_minimum() {
    let fe = MelFrontend::new(MelConfig::default()).unwrap();
    let err = fe.mel_spectrogram(&tone(440.0, 2000)).unwrap_err().to_string();
    assert!(err.contains("2048"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn framing_formula(len in 2048usize..40_000) {
        let fe = MelFrontend::new(MelConfig::default()).unwrap();
        let m = fe.mel_spectrogram(&tone(220.0, len)).unwrap();
        prop_assert_eq!(m.n_frames(), (len - 2048) / 512 + 1);
    }

    #[test]
    fn shifted_labels_follow_transposition(tonic in 0u8..12, minor: bool, shift in -6i32..=6) {
        let key = if minor { Key::minor(tonic) } else { Key::major(tonic) };
        let spec = spec_with(key, 1.0, 5);
        let (_, label) = synth_shifted(&spec, shift).unwrap();
        prop_assert_eq!(label, transpose_key(key, shift));
        prop_assert_eq!(label.mode(), if minor { Mode::Minor } else { Mode::Major });
    }
}
