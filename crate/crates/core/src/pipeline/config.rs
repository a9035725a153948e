use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::MelConfig;
use crate::contrastive::PretrainConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::probe::{ProbeArch, TrainConfig};
use crate::seed;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub pretrain_manifest: Option<PathBuf>,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
}

/// Everything a run needs, read from one TOML file.
///
/// The `seed` fields inside `[pretrain]` and `[train]` are ignored: every stage
/// seed is derived from the root `seed` by stage name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub context_len: usize,
    /// Inclusive range `"lo..hi"` or a comma list.
    pub shifts: String,
    /// Fraction of training tracks held out for probe model selection.
    pub val_fraction: f64,
    pub synth_duration_s: f64,
    pub frontend: MelConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeArch,
    pub train: TrainConfig,
    pub data: DataPaths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            context_len: 100_000,
            shifts: "-6..6".into(),
            val_fraction: 0.1,
            synth_duration_s: 7.0,
            frontend: MelConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            probe: ProbeArch::default(),
            train: TrainConfig::default(),
            data: DataPaths::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses and validates; relative data paths resolve against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for p in [
            &mut cfg.data.pretrain_manifest,
            &mut cfg.data.train_manifest,
            &mut cfg.data.test_manifest,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.probe.validate()?;
        self.train.validate()?;
        parse_shift_range(&self.shifts)?;
        if self.context_len == 0 {
            return Err(Error::Config("context_len must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if !(self.synth_duration_s > 0.0) {
            return Err(Error::Config("synth_duration_s must be positive".into()));
        }
        if self.frontend.n_mels != self.encoder.n_mels {
            return Err(Error::Config(format!(
                "frontend has {} Mel bands, encoder expects {}",
                self.frontend.n_mels, self.encoder.n_mels
            )));
        }
        if self.probe.input_dim != self.encoder.embed_dim {
            return Err(Error::Config(format!(
                "probe input {} differs from embedding width {}",
                self.probe.input_dim, self.encoder.embed_dim
            )));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive(self.seed, stage)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.stage_seed("pretrain"),
            ..self.pretrain.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed("probe"),
            ..self.train.clone()
        }
    }

    pub fn shift_list(&self) -> Result<Vec<i32>> {
        parse_shift_range(&self.shifts)
    }
}

/// Checks that a configured input path is set and exists.
pub fn require_path<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} configured")))?;
    if !p.exists() {
        return Err(Error::Config(format!(
            "{what} {} does not exist",
            p.display()
        )));
    }
    Ok(p)
}

/// `"-6..6"` (inclusive), `"0,2,-3"` or a single integer.
pub fn parse_shift_range(text: &str) -> Result<Vec<i32>> {
    let bad = || Error::Config(format!("bad shift range {text:?}"));
    let num = |s: &str| s.trim().parse::<i32>().map_err(|_| bad());
    let text = text.trim();
    let out: Vec<i32> = if let Some((lo, hi)) = text.split_once("..") {
        let (lo, hi) = (
            num(lo)?,
            num(hi.trim_start_matches('=')).map_err(|_| bad())?,
        );
        if lo > hi {
            return Err(bad());
        }
        (lo..=hi).collect()
    } else {
        text.split(',').map(num).collect::<Result<_>>()?
    };
    if out.iter().any(|s| s.abs() > 24) {
        return Err(Error::Config(format!(
            "shifts in {text:?} exceed two octaves"
        )));
    }
    let mut dedup = out.clone();
    dedup.sort_unstable();
    dedup.dedup();
    if dedup.len() != out.len() {
        return Err(Error::Config(format!("repeated shift in {text:?}")));
    }
    Ok(out)
}
