use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{random_spec, read_wav, synth_clip, SynthSpec, Waveform};
use crate::error::{invalid, Error, Result};
use crate::keyeval::Key;
use crate::seed;

/// Random-access clip collection used for pretraining.
pub trait ClipSource: Sync {
    fn len(&self) -> usize;

    fn clip(&self, index: usize) -> Result<Waveform>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ClipSource for [Waveform] {
    fn len(&self) -> usize {
        <[Waveform]>::len(self)
    }

    fn clip(&self, index: usize) -> Result<Waveform> {
        self.get(index)
            .cloned()
            .ok_or_else(|| invalid(format!("clip {index} out of range")))
    }
}

impl ClipSource for Vec<Waveform> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn clip(&self, index: usize) -> Result<Waveform> {
        ClipSource::clip(self.as_slice(), index)
    }
}

/// WAV files from a manifest: either one path per line, or a CSV whose header
/// has a `path` column (other columns ignored). Relative paths resolve against
/// the manifest's directory.
#[derive(Debug, Clone)]
pub struct WavCorpus {
    paths: Vec<PathBuf>,
    sample_rate: u32,
}

impl WavCorpus {
    pub fn new(paths: Vec<PathBuf>, sample_rate: u32) -> Self {
        WavCorpus { paths, sample_rate }
    }

    pub fn from_manifest(manifest: &Path, sample_rate: u32) -> Result<Self> {
        let text = fs::read_to_string(manifest)?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let first = lines.next().unwrap_or_default();
        let paths = if first.split(',').any(|h| h.trim() == "path") {
            let mut reader = csv::ReaderBuilder::new()
                .comment(Some(b'#'))
                .from_reader(text.as_bytes());
            let col = reader
                .headers()?
                .iter()
                .position(|h| h.trim() == "path")
                .ok_or_else(|| Error::malformed(manifest, "missing path column"))?;
            let mut out = Vec::new();
            for record in reader.records() {
                let record = record?;
                let p = record
                    .get(col)
                    .ok_or_else(|| Error::malformed(manifest, "short row"))?;
                out.push(base.join(p.trim()));
            }
            out
        } else {
            std::iter::once(first)
                .chain(lines)
                .filter(|l| !l.is_empty())
                .map(|l| base.join(l))
                .collect()
        };
        if paths.is_empty() {
            return Err(Error::malformed(manifest, "no audio paths listed"));
        }
        Ok(WavCorpus { paths, sample_rate })
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }
}

impl ClipSource for WavCorpus {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn clip(&self, index: usize) -> Result<Waveform> {
        let path = self
            .paths
            .get(index)
            .ok_or_else(|| invalid(format!("clip {index} out of range")))?;
        read_wav(path, self.sample_rate)
    }
}

/// Lazily rendered synthetic clips with random keys and rendering parameters.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    specs: Vec<SynthSpec>,
}

impl SynthCorpus {
    pub fn new(n: usize, duration_s: f64, root_seed: u64) -> Self {
        let specs = (0..n as u64)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(root_seed, &[i]));
                let key = Key::from_class_index(rng.random_range(0..24)).expect("index < 24");
                random_spec(key, duration_s, rng.random())
            })
            .collect();
        SynthCorpus { specs }
    }

    pub fn from_specs(specs: Vec<SynthSpec>) -> Self {
        SynthCorpus { specs }
    }

    pub fn specs(&self) -> &[SynthSpec] {
        &self.specs
    }
}

impl ClipSource for SynthCorpus {
    fn len(&self) -> usize {
        self.specs.len()
    }

    fn clip(&self, index: usize) -> Result<Waveform> {
        let spec = self
            .specs
            .get(index)
            .ok_or_else(|| invalid(format!("clip {index} out of range")))?;
        synth_clip(spec)
    }
}
