//! Waveforms, keyed synthesis, pitch shifting and the log-Mel frontend.

pub mod effects;
mod mel;
mod pitch;
mod synth;
mod waveform;

pub use mel::{hz_to_mel, mel_to_hz, MelConfig, MelFrontend, MelSpectrogram, NormStats};
pub use pitch::{pitch_shift, DEFAULT_SHIFT_BOUND};
pub use synth::{
    midi_to_hz, random_spec, scale_intervals, scale_pitch_classes, synth_clip, synth_shifted,
    SynthSpec, SYNTH_PEAK,
};
pub use waveform::{read_wav, write_wav, Waveform, DEFAULT_SAMPLE_RATE};
