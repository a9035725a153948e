//! Configuration, manifests, feature caches, run records and the command
//! implementations behind the `keyscope` binary.

mod cache;
mod config;
mod record;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::analysis::{
    fit_linear_map, paired_embeddings, pca_coordinates, write_coordinates_csv, write_report_csv,
    AugMapReport, Augmentation,
};
use crate::audio::{random_spec, synth_clip, write_wav, MelConfig, Waveform};
use crate::contrastive::{
    pretrain, write_loss_csv, ClipSource, PretrainRun, SynthCorpus, WavCorpus,
};
use crate::encoder::{FeatureCache, FrozenEncoder};
use crate::error::{Error, Result};
use crate::keyeval::{parse_key, read_key_manifest, write_key_manifest, EvalReport, Key};
use crate::par;
use crate::probe::{
    arch_grid, evaluate_probe, for_each_variant, grid_search, optimizer_grid, split_track_ids,
    train_probe, write_grid_csv, GridRow, LabeledFeature, Probe, ProbeArch, Track, TrackAudio,
    TrainConfig, TrainedProbe,
};
use crate::seed;
use crate::tensor::checkpoint::checkpoint_hash;

pub use cache::{
    cache_root, CacheLock, FeatureStore, IndexRow, Selection, CACHE_ENV, INDEX_FILE, LOCK_FILE,
};
pub use config::{parse_shift_range, require_path, DataPaths, PipelineConfig};
pub use record::{content_hash, RunRecord, RUN_RECORD_FILE};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const GRID_FILE: &str = "grid.csv";
pub const AUG_REPORT_FILE: &str = "aug_report.csv";
const LOCK_TIMEOUT: Duration = Duration::from_secs(600);

/// `"all"`, or keys separated by `,` or `;` (e.g. `"C major, A minor"`).
pub fn parse_keys(text: &str) -> Result<Vec<Key>> {
    if text.trim().eq_ignore_ascii_case("all") {
        return Ok(Key::all().collect());
    }
    let keys: Vec<Key> = text
        .split([',', ';'])
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_key(s.trim()))
        .collect::<Result<_>>()?;
    if keys.is_empty() {
        return Err(Error::InvalidArgument("no keys given".into()));
    }
    Ok(keys)
}

/// Tracks from a `path,key` manifest; ids are the paths as written in the manifest.
pub fn manifest_tracks(manifest: &Path) -> Result<Vec<Track>> {
    require_input(manifest, "manifest")?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = read_key_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::malformed(manifest, "manifest lists no tracks"));
    }
    let mut seen = HashSet::new();
    entries
        .into_iter()
        .map(|e| {
            let id = e
                .path
                .strip_prefix(base)
                .unwrap_or(&e.path)
                .to_string_lossy()
                .replace('\\', "/");
            if !seen.insert(id.clone()) {
                return Err(Error::malformed(
                    manifest,
                    format!("track {id} listed twice"),
                ));
            }
            Ok(Track {
                id,
                key: e.key,
                audio: TrackAudio::Wav(e.path),
            })
        })
        .collect()
}

/// Fails with a data error naming `path` when it does not exist.
pub fn require_input(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::malformed(path, format!("{what} not found")))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", dir.display()),
        ))
    })
}

/// Writes `K` clips per key plus a `path,key` manifest; returns the manifest path.
#[derive(Debug, Clone)]
pub struct SynthDataCmd {
    pub out: PathBuf,
    pub keys: Vec<Key>,
    pub clips_per_key: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub args: Vec<String>,
}

impl SynthDataCmd {
    pub fn run(&self) -> Result<PathBuf> {
        if self.clips_per_key == 0 {
            return Err(Error::InvalidArgument(
                "clips per key must be positive".into(),
            ));
        }
        ensure_dir(&self.out)?;
        let mut record = RunRecord::start(
            "synth-data",
            self.args.clone(),
            &serde_json::json!({
                "keys": self.keys.iter().map(|k| k.to_string()).collect::<Vec<_>>(),
                "clips_per_key": self.clips_per_key,
                "duration_s": self.duration_s,
                "seed": self.seed,
            }),
        )?;
        let root = seed::derive(self.seed, "synth-data");
        let jobs: Vec<(Key, usize)> = self
            .keys
            .iter()
            .flat_map(|&k| (0..self.clips_per_key).map(move |j| (k, j)))
            .collect();
        let names = par::map(&jobs, |&(key, j)| -> Result<(String, Key)> {
            let spec = random_spec(
                key,
                self.duration_s,
                seed::mix(root, &[key.class_index() as u64, j as u64]),
            );
            let name = format!("k{:02}_{j:04}.wav", key.class_index());
            write_wav(&self.out.join(&name), &synth_clip(&spec)?)?;
            Ok((name, key))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let manifest = self.out.join(MANIFEST_FILE);
        write_key_manifest(&manifest, &names)?;
        record.artifact(&manifest);
        record.finish(&self.out.join(RUN_RECORD_FILE))?;
        log::info!("wrote {} clips to {}", names.len(), self.out.display());
        Ok(manifest)
    }
}

/// Where pretraining audio comes from.
#[derive(Debug, Clone)]
pub enum PretrainSource {
    Manifest(PathBuf),
    /// Lazily synthesised clips with random keys.
    Synthetic(usize),
}

#[derive(Debug, Clone)]
pub struct PretrainCmd {
    pub config: PipelineConfig,
    /// Falls back to `data.pretrain_manifest`.
    pub source: Option<PretrainSource>,
    pub out: PathBuf,
    pub args: Vec<String>,
}

impl PretrainCmd {
    /// Writes the encoder checkpoint, `loss.csv` and `run.json` into `out`. On
    /// divergence the last good snapshot is written before the error is returned.
    pub fn run(&self) -> Result<PretrainRun> {
        let cfg = &self.config;
        let pre = cfg.pretrain_config();
        let mut record = RunRecord::start("pretrain", self.args.clone(), &resolved(cfg))?;
        let source: Box<dyn ClipSource> = match &self.source {
            Some(PretrainSource::Synthetic(n)) => Box::new(SynthCorpus::new(
                *n,
                cfg.synth_duration_s,
                cfg.stage_seed("pretrain.corpus"),
            )),
            Some(PretrainSource::Manifest(m)) => {
                require_input(m, "manifest")?;
                record.input(m)?;
                Box::new(WavCorpus::from_manifest(m, cfg.frontend.sample_rate)?)
            }
            None => {
                let m = require_path(&cfg.data.pretrain_manifest, "pretrain manifest")?;
                record.input(m)?;
                Box::new(WavCorpus::from_manifest(m, cfg.frontend.sample_rate)?)
            }
        };
        ensure_dir(&self.out)?;
        let result = pretrain(source.as_ref(), &pre, &cfg.encoder, &cfg.frontend);
        let run = match result {
            Ok(run) => run,
            Err(Error::Diverged {
                step,
                last_good_step,
                last_good,
            }) => {
                last_good.encoder.save(&self.out)?;
                write_loss_csv(&self.out.join(LOSS_FILE), &last_good.curve)?;
                return Err(Error::Diverged {
                    step,
                    last_good_step,
                    last_good,
                });
            }
            Err(e) => return Err(e),
        };
        run.encoder.save(&self.out)?;
        write_loss_csv(&self.out.join(LOSS_FILE), &run.curve)?;
        record.artifact(&self.out);
        record.artifact(self.out.join(LOSS_FILE));
        record.finish(&self.out.join(RUN_RECORD_FILE))?;
        Ok(run)
    }
}

/// Config snapshot with the derived stage seeds filled in.
fn resolved(cfg: &PipelineConfig) -> serde_json::Value {
    let mut c = cfg.clone();
    c.pretrain = cfg.pretrain_config();
    c.train = cfg.train_config();
    serde_json::to_value(c).unwrap_or(serde_json::Value::Null)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractSummary {
    pub variants: usize,
    pub hits: usize,
    pub computed: usize,
}

/// Featurises every (track, shift) variant missing from `store`.
pub fn extract_to_store(
    tracks: &[Track],
    shifts: &[i32],
    encoder: &FrozenEncoder,
    ckpt_hash: &str,
    context_len: usize,
    store: &mut FeatureStore,
) -> Result<ExtractSummary> {
    let mut jobs = Vec::new();
    let mut hits = 0;
    for (t, track) in tracks.iter().enumerate() {
        for &s in shifts {
            if store.get(&track.id, s, context_len, ckpt_hash).is_some() {
                hits += 1;
                log::debug!("cache hit: {} shift {s}", track.id);
            } else {
                jobs.push((t, s));
            }
        }
    }
    if hits > 0 {
        log::info!(
            "cache hits: {hits} of {} variants reused",
            hits + jobs.len()
        );
    }
    let mut since_save = 0;
    for_each_variant(
        tracks,
        &jobs,
        encoder,
        context_len,
        |t, s, key, embeddings| {
            let entry = FeatureCache {
                track_id: tracks[t].id.clone(),
                context_len,
                checkpoint_hash: ckpt_hash.to_string(),
                shift: s,
                embeddings,
            };
            store.insert(&entry, &key.to_string())?;
            since_save += 1;
            if since_save >= 256 {
                store.save_index()?;
                since_save = 0;
            }
            Ok(())
        },
    )?;
    store.save_index()?;
    Ok(ExtractSummary {
        variants: hits + jobs.len(),
        hits,
        computed: jobs.len(),
    })
}

#[derive(Debug, Clone)]
pub struct ExtractCmd {
    pub manifest: PathBuf,
    pub ckpt: PathBuf,
    /// Frontend the caller expects; mismatches with the checkpoint are errors.
    pub frontend: Option<MelConfig>,
    pub context_len: usize,
    pub shifts: Vec<i32>,
    pub out: PathBuf,
    pub args: Vec<String>,
}

impl ExtractCmd {
    pub fn run(&self) -> Result<ExtractSummary> {
        require_input(&self.ckpt, "encoder checkpoint")?;
        let encoder = FrozenEncoder::load(&self.ckpt)?;
        if let Some(mel) = &self.frontend {
            encoder.check_frontend(mel)?;
        }
        let hash = checkpoint_hash(&self.ckpt)?;
        let tracks = manifest_tracks(&self.manifest)?;
        let mut record = RunRecord::start(
            "extract",
            self.args.clone(),
            &serde_json::json!({
                "context_len": self.context_len,
                "shifts": self.shifts,
                "checkpoint_hash": hash,
            }),
        )?;
        record.input(&self.manifest)?;
        record.input(&self.ckpt)?;
        let _lock = CacheLock::acquire(&self.out, LOCK_TIMEOUT)?;
        let mut store = FeatureStore::open(&self.out)?;
        let summary = extract_to_store(
            &tracks,
            &self.shifts,
            &encoder,
            &hash,
            self.context_len,
            &mut store,
        )?;
        record.artifact(self.out.join(INDEX_FILE));
        let runs = self.out.join("runs");
        ensure_dir(&runs)?;
        record.finish(&runs.join(format!("extract-{}-{}.json", &hash[..12], self.context_len)))?;
        Ok(summary)
    }
}

/// Cached features restricted to one manifest's tracks.
#[derive(Debug, Clone)]
pub struct FeatureSource {
    pub cache: PathBuf,
    pub manifest: PathBuf,
    /// Prefix of the checkpoint hash; needed when the cache holds several.
    pub checkpoint_hash: Option<String>,
    pub context_len: Option<usize>,
}

impl FeatureSource {
    pub fn track_ids(&self) -> Result<Vec<String>> {
        Ok(manifest_tracks(&self.manifest)?
            .into_iter()
            .map(|t| t.id)
            .collect())
    }

    pub fn load(&self, ids: &[String], shifts: Option<&[i32]>) -> Result<Vec<LabeledFeature>> {
        let store = FeatureStore::open(&self.cache)?;
        let tracks: HashSet<String> = ids.iter().cloned().collect();
        let feats = store.features(&Selection {
            checkpoint_hash: self.checkpoint_hash.as_deref(),
            context_len: self.context_len,
            tracks: Some(&tracks),
            shifts,
        })?;
        if feats.is_empty() {
            return Err(Error::malformed(
                &self.cache,
                format!(
                    "no cached features for the tracks of {}; run extract first",
                    self.manifest.display()
                ),
            ));
        }
        Ok(feats)
    }

    /// Training split (all cached shifts) and validation split (unshifted only).
    pub fn train_val(
        &self,
        fraction: f64,
        seed: u64,
    ) -> Result<(Vec<LabeledFeature>, Vec<LabeledFeature>)> {
        let (train_ids, val_ids) = split_track_ids(&self.track_ids()?, fraction, seed);
        Ok((
            self.load(&train_ids, None)?,
            self.load(&val_ids, Some(&[0]))?,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct TrainProbeCmd {
    pub config: PipelineConfig,
    pub features: FeatureSource,
    pub out: PathBuf,
    pub args: Vec<String>,
}

impl TrainProbeCmd {
    /// Saves the best-epoch probe, `history.csv` and `run.json` into `out`.
    pub fn run(&self) -> Result<TrainedProbe> {
        let cfg = &self.config;
        let mut record = RunRecord::start("train-probe", self.args.clone(), &resolved(cfg))?;
        record.input(&self.features.manifest)?;
        record.input(&self.features.cache.join(INDEX_FILE))?;
        let (train, val) = self
            .features
            .train_val(cfg.val_fraction, cfg.stage_seed("probe.split"))?;
        let trained = train_probe(&train, &val, &cfg.probe, &cfg.train_config())?;
        ensure_dir(&self.out)?;
        trained.probe.save(&self.out)?;
        let mut csv = String::from("epoch,train_loss,val_loss,val_weighted,val_correct\n");
        for h in &trained.history {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                h.epoch, h.train_loss, h.val_loss, h.val_weighted, h.val_correct
            ));
        }
        fs::write(self.out.join(HISTORY_FILE), csv)?;
        record.artifact(&self.out);
        record.finish(&self.out.join(RUN_RECORD_FILE))?;
        Ok(trained)
    }
}

/// Every (architecture, optimiser) cell the full search visits, architecture-major.
pub fn grid_cells(epochs: usize, patience: usize, seed: u64) -> Vec<(ProbeArch, TrainConfig)> {
    let configs = optimizer_grid(epochs, patience, seed);
    arch_grid()
        .into_iter()
        .flat_map(|a| configs.iter().map(move |c| (a.clone(), c.clone())))
        .collect()
}

#[derive(Debug, Clone)]
pub struct GridSearchCmd {
    pub config: PipelineConfig,
    pub features: FeatureSource,
    pub out: PathBuf,
    /// Truncate the architecture / optimiser lists (for budgeted runs).
    pub max_archs: Option<usize>,
    pub max_configs: Option<usize>,
    pub args: Vec<String>,
}

impl GridSearchCmd {
    pub fn run(&self) -> Result<Vec<GridRow>> {
        let cfg = &self.config;
        let train_cfg = cfg.train_config();
        let mut record = RunRecord::start("grid-search", self.args.clone(), &resolved(cfg))?;
        record.input(&self.features.manifest)?;
        record.input(&self.features.cache.join(INDEX_FILE))?;
        let (train, val) = self
            .features
            .train_val(cfg.val_fraction, cfg.stage_seed("probe.split"))?;
        let mut archs = arch_grid();
        archs.truncate(self.max_archs.unwrap_or(usize::MAX));
        let mut configs = optimizer_grid(train_cfg.epochs, train_cfg.patience, train_cfg.seed);
        configs.truncate(self.max_configs.unwrap_or(usize::MAX));
        log::info!("grid search over {} × {} cells", archs.len(), configs.len());
        let rows = grid_search(&train, &val, &archs, &configs);
        ensure_dir(&self.out)?;
        write_grid_csv(&self.out.join(GRID_FILE), &rows)?;
        record.artifact(self.out.join(GRID_FILE));
        record.finish(&self.out.join(RUN_RECORD_FILE))?;
        Ok(rows)
    }
}

#[derive(Debug, Clone)]
pub struct EvaluateCmd {
    pub probe: PathBuf,
    pub features: FeatureSource,
    pub model_name: String,
    /// Report CSV; stdout only when `None`.
    pub out: Option<PathBuf>,
}

impl EvaluateCmd {
    /// Track-level report on the unshifted test features.
    pub fn run(&self) -> Result<EvalReport> {
        require_input(&self.probe, "probe checkpoint")?;
        let probe = Probe::load(&self.probe)?;
        let ids = self.features.track_ids()?;
        let test = self.features.load(&ids, Some(&[0]))?;
        let (report, _) = evaluate_probe(&probe, &test)?;
        if let Some(path) = &self.out {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                ensure_dir(dir)?;
            }
            report.write_csv(fs::File::create(path)?, &self.model_name)?;
        }
        Ok(report)
    }
}

#[derive(Debug, Clone)]
pub struct AnalyzeAugCmd {
    pub manifest: PathBuf,
    pub ckpt: PathBuf,
    pub augmentations: Vec<Augmentation>,
    /// Use at most this many clips from the manifest.
    pub clips: Option<usize>,
    pub context_len: usize,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub out: PathBuf,
    pub args: Vec<String>,
}

impl AnalyzeAugCmd {
    /// Writes `aug_report.csv` (one row per augmentation) and one PCA CSV per augmentation.
    pub fn run(&self) -> Result<Vec<AugMapReport>> {
        if self.augmentations.is_empty() {
            return Err(Error::InvalidArgument("no augmentations given".into()));
        }
        let encoder = FrozenEncoder::load(&self.ckpt)?;
        let mut record = RunRecord::start(
            "analyze-aug",
            self.args.clone(),
            &serde_json::json!({
                "augmentations": self.augmentations,
                "clips": self.clips,
                "context_len": self.context_len,
                "lambda": self.lambda,
                "seed": self.seed,
            }),
        )?;
        record.input(&self.manifest)?;
        record.input(&self.ckpt)?;
        let corpus = WavCorpus::from_manifest(&self.manifest, encoder.meta().mel.sample_rate)?;
        let n = self.clips.unwrap_or(usize::MAX).min(corpus.len());
        let clips: Vec<Waveform> = par::map_range(n, |i| corpus.clip(i))
            .into_iter()
            .collect::<Result<_>>()?;
        let seed = seed::derive(self.seed, "analyze-aug");
        ensure_dir(&self.out)?;
        let (_, pairs) = paired_embeddings(
            &clips,
            &encoder,
            &self.augmentations,
            self.context_len,
            seed,
        )?;
        let mut reports = Vec::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            let (_, report) = fit_linear_map(p, self.lambda, seed)?;
            reports.push(report);
            let name = format!("pca_{i:02}_{}.csv", self.augmentations[i].name());
            write_coordinates_csv(&self.out.join(&name), &pca_coordinates(p)?)?;
            record.artifact(self.out.join(name));
        }
        write_report_csv(&self.out.join(AUG_REPORT_FILE), &reports)?;
        record.artifact(self.out.join(AUG_REPORT_FILE));
        record.finish(&self.out.join(RUN_RECORD_FILE))?;
        Ok(reports)
    }
}
