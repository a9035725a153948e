use std::fs;
use std::path::{Path, PathBuf};

use super::key::{parse_key, Key};
use crate::error::{Error, Result};

/// One `path,key` row of an annotation manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub key: Key,
}

/// Reads a GiantSteps-style annotation: a text file holding a single key string.
pub fn read_key_file(path: &Path) -> Result<Key> {
    let text = fs::read_to_string(path)?;
    let line = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or_else(|| Error::malformed(path, "empty key annotation"))?;
    parse_key(line)
}

/// Pairs every `<stem>.wav` in `audio_dir` with `<stem>.key` in `key_dir`.
/// Audio files without an annotation are skipped.
pub fn load_giantsteps_dir(audio_dir: &Path, key_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(audio_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    for audio in paths {
        let Some(stem) = audio.file_stem() else {
            continue;
        };
        let mut key_path = key_dir.join(stem);
        key_path.set_extension("key");
        if !key_path.exists() {
            log::debug!("no annotation for {}", audio.display());
            continue;
        }
        entries.push(ManifestEntry {
            key: read_key_file(&key_path)?,
            path: audio,
        });
    }
    Ok(entries)
}

/// Reads a `path,key` CSV with a header row. Relative paths resolve against the
/// manifest's directory.
pub fn read_key_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::malformed(path, format!("missing column {name:?}")))
    };
    let (path_col, key_col) = (col("path")?, col("key")?);
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record?;
        let raw = record
            .get(path_col)
            .ok_or_else(|| Error::malformed(path, "short row"))?;
        let key_text = record
            .get(key_col)
            .ok_or_else(|| Error::malformed(path, "short row"))?;
        let p = PathBuf::from(raw.trim());
        entries.push(ManifestEntry {
            path: if p.is_absolute() { p } else { base.join(p) },
            key: parse_key(key_text)?,
        });
    }
    Ok(entries)
}

/// Writes a `path,key` manifest; paths are written as given.
pub fn write_key_manifest(path: &Path, rows: &[(String, Key)]) -> Result<()> {
    let mut out = String::from("path,key\n");
    for (p, k) in rows {
        out.push_str(&format!("{p},{k}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            ("a.wav".to_string(), Key::minor(2)),
            ("sub/b.wav".to_string(), Key::major(10)),
        ];
        write_key_manifest(&path, &rows).unwrap();
        let back = read_key_manifest(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].path, dir.path().join("a.wav"));
        assert_eq!(back[1].key, Key::major(10));
    }

    #[test]
    fn giantsteps_dir_pairs_stems() {
        let dir = tempfile::tempdir().unwrap();
        let audio = dir.path().join("audio");
        let keys = dir.path().join("keys");
        fs::create_dir_all(&audio).unwrap();
        fs::create_dir_all(&keys).unwrap();
        fs::write(audio.join("1.wav"), b"").unwrap();
        fs::write(audio.join("2.wav"), b"").unwrap();
        fs::write(keys.join("1.key"), "Eb minor\n").unwrap();
        let entries = load_giantsteps_dir(&audio, &keys).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].key, Key::minor(3));

        fs::write(keys.join("2.key"), "\n").unwrap();
        assert!(load_giantsteps_dir(&audio, &keys).is_err());
    }
}
