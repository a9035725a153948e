use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{read_feature_cache, write_feature_cache, FeatureCache};
use crate::error::{Error, Result};
use crate::keyeval::parse_key;
use crate::probe::LabeledFeature;

pub const INDEX_FILE: &str = "index.csv";
pub const LOCK_FILE: &str = ".lock";
/// Environment variable naming the default cache root.
pub const CACHE_ENV: &str = "KEYSCOPE_CACHE";

/// Cache root: `explicit`, else `$KEYSCOPE_CACHE`, else `fallback`.
pub fn cache_root(explicit: Option<&Path>, fallback: &Path) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
        .unwrap_or_else(|| fallback.to_path_buf())
}

/// Advisory lock on a cache directory, released on drop.
#[derive(Debug)]
pub struct CacheLock {
    path: PathBuf,
}

impl CacheLock {
    pub fn acquire(dir: &Path, timeout: Duration) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        let start = Instant::now();
        loop {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id())?;
                    return Ok(CacheLock { path });
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    if start.elapsed() >= timeout {
                        return Err(Error::Io(io::Error::new(
                            io::ErrorKind::WouldBlock,
                            format!(
                                "{} is locked by another run (delete {} if stale)",
                                dir.display(),
                                path.display()
                            ),
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(100));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Drop for CacheLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// One cached track variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub track_id: String,
    /// Label after transposition.
    pub key: String,
    pub shift: i32,
    pub context_len: usize,
    pub checkpoint_hash: String,
    pub windows: usize,
    pub file: String,
}

type EntryKey = (String, i32, usize, String);

fn entry_key(track_id: &str, shift: i32, context_len: usize, hash: &str) -> EntryKey {
    (track_id.to_string(), shift, context_len, hash.to_string())
}

/// Directory of per-variant feature files plus a CSV index, keyed by
/// (track, shift, context length, checkpoint hash).
#[derive(Debug)]
pub struct FeatureStore {
    dir: PathBuf,
    rows: BTreeMap<EntryKey, IndexRow>,
}

/// Which cached rows to load.
#[derive(Debug, Clone, Default)]
pub struct Selection<'a> {
    pub checkpoint_hash: Option<&'a str>,
    pub context_len: Option<usize>,
    pub tracks: Option<&'a HashSet<String>>,
    pub shifts: Option<&'a [i32]>,
}

impl FeatureStore {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut rows = BTreeMap::new();
        let index = dir.join(INDEX_FILE);
        if index.exists() {
            let mut reader = csv::Reader::from_path(&index)?;
            for row in reader.deserialize::<IndexRow>() {
                let row = row?;
                rows.insert(
                    entry_key(
                        &row.track_id,
                        row.shift,
                        row.context_len,
                        &row.checkpoint_hash,
                    ),
                    row,
                );
            }
        }
        Ok(FeatureStore {
            dir: dir.to_path_buf(),
            rows,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &IndexRow> {
        self.rows.values()
    }

    pub fn get(
        &self,
        track_id: &str,
        shift: i32,
        context_len: usize,
        hash: &str,
    ) -> Option<&IndexRow> {
        self.rows
            .get(&entry_key(track_id, shift, context_len, hash))
    }

    /// Writes the feature file and records it; call [`save_index`](Self::save_index) to persist.
    pub fn insert(&mut self, entry: &FeatureCache, key: &str) -> Result<()> {
        let mut h = Sha256::new();
        h.update(format!(
            "{}\0{}\0{}\0{}",
            entry.track_id, entry.shift, entry.context_len, entry.checkpoint_hash
        ));
        let digest: String = h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        let stem: String = entry
            .track_id
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                    c
                } else {
                    '_'
                }
            })
            .take(60)
            .collect();
        let file = format!("{stem}__{digest}.ksfc");
        write_feature_cache(&self.dir.join(&file), entry)?;
        let row = IndexRow {
            track_id: entry.track_id.clone(),
            key: key.to_string(),
            shift: entry.shift,
            context_len: entry.context_len,
            checkpoint_hash: entry.checkpoint_hash.clone(),
            windows: entry.embeddings.len(),
            file,
        };
        self.rows.insert(
            entry_key(
                &row.track_id,
                row.shift,
                row.context_len,
                &row.checkpoint_hash,
            ),
            row,
        );
        Ok(())
    }

    /// Atomically rewrites the index.
    pub fn save_index(&self) -> Result<()> {
        let tmp = self.dir.join(format!("{INDEX_FILE}.tmp"));
        {
            let mut w = csv::Writer::from_path(&tmp)?;
            for row in self.rows.values() {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        fs::rename(&tmp, self.dir.join(INDEX_FILE))?;
        Ok(())
    }

    pub fn load(&self, row: &IndexRow) -> Result<FeatureCache> {
        let entry = read_feature_cache(&self.dir.join(&row.file))?;
        if entry.track_id != row.track_id
            || entry.shift != row.shift
            || entry.checkpoint_hash != row.checkpoint_hash
        {
            return Err(Error::malformed(
                self.dir.join(&row.file),
                "file does not match its index row",
            ));
        }
        Ok(entry)
    }

    /// Loads the selected rows as labelled window features. Fails when the
    /// selection spans several checkpoints or context lengths.
    pub fn features(&self, sel: &Selection<'_>) -> Result<Vec<LabeledFeature>> {
        let chosen: Vec<&IndexRow> = self
            .rows
            .values()
            .filter(|r| {
                sel.checkpoint_hash
                    .is_none_or(|h| r.checkpoint_hash.starts_with(h))
            })
            .filter(|r| sel.context_len.is_none_or(|c| r.context_len == c))
            .filter(|r| sel.tracks.is_none_or(|t| t.contains(&r.track_id)))
            .filter(|r| sel.shifts.is_none_or(|s| s.contains(&r.shift)))
            .collect();
        let combos: BTreeSet<(&str, usize)> = chosen
            .iter()
            .map(|r| (r.checkpoint_hash.as_str(), r.context_len))
            .collect();
        if combos.len() > 1 {
            return Err(Error::Config(format!(
                "{} holds features from {} checkpoint/context combinations; select one",
                self.dir.display(),
                combos.len()
            )));
        }
        let mut out = Vec::new();
        for row in chosen {
            let class = parse_key(&row.key)?.class_index();
            for (w, embedding) in self.load(row)?.embeddings.into_iter().enumerate() {
                out.push(LabeledFeature {
                    embedding,
                    class,
                    track_id: row.track_id.clone(),
                    window: w,
                    shift: row.shift,
                });
            }
        }
        Ok(out)
    }
}
