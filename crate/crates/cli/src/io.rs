//! File formats and atomic output.
//!
//! Every artifact is written to a temporary file in the destination
//! directory and renamed into place, so a failed run leaves no partial file.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trajformer_core::ingest::{Sample, TrackPoint};
use trajformer_core::noise::NoisePlan;

/// Writes `bytes` to `path` via a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).with_context(|| format!("temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `# key = value` lines echoing the run configuration.
pub fn comment_header(config_text: &str) -> String {
    config_text.lines().map(|l| format!("# {l}\n")).collect()
}

/// Strips leading `#` comment lines from delimited text.
fn without_comments(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct TrackRow {
    vehicle_id: u64,
    t: f64,
    x: f64,
    y: f64,
    len: f64,
    wid: f64,
}

pub fn tracks_to_csv(points: &[TrackPoint], header: &str) -> Result<Vec<u8>> {
    let mut out = header.as_bytes().to_vec();
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(TrackRow {
            vehicle_id: p.vehicle_id,
            t: p.t,
            x: p.x,
            y: p.y,
            len: p.len,
            wid: p.wid,
        })?;
    }
    out.extend(w.into_inner()?);
    Ok(out)
}

pub fn read_tracks(path: &Path) -> Result<Vec<TrackPoint>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let body = without_comments(&text);
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let headers = r.headers()?.clone();
    let want = ["vehicle_id", "t", "x", "y", "len", "wid"];
    if headers.iter().collect::<Vec<_>>() != want {
        bail!("{}: header must be `{}`", path.display(), want.join(","));
    }
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<TrackRow>().enumerate() {
        let row = row.with_context(|| format!("{}: record {}", path.display(), i + 1))?;
        out.push(TrackPoint {
            vehicle_id: row.vehicle_id,
            t: row.t,
            x: row.x,
            y: row.y,
            len: row.len,
            wid: row.wid,
        });
    }
    Ok(out)
}

/// One JSON record per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Train/test membership by sample key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub fn split_path(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".split");
    PathBuf::from(s)
}

/// A dataset file together with its split manifest.
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: SplitManifest,
    pub hash: String,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let samples = read_jsonl(path)?;
        let sp = split_path(path);
        let split: SplitManifest = serde_json::from_slice(
            &fs::read(&sp).with_context(|| format!("reading split manifest {}", sp.display()))?,
        )?;
        Ok(Dataset {
            samples,
            split,
            hash: sha256_hex(&bytes),
        })
    }

    fn pick(&self, keys: &[String]) -> Result<Vec<Sample>> {
        let index: std::collections::HashMap<String, &Sample> =
            self.samples.iter().map(|s| (s.meta.key(), s)).collect();
        keys.iter()
            .map(|k| {
                index
                    .get(k)
                    .map(|s| (*s).clone())
                    .with_context(|| format!("split manifest names unknown sample {k}"))
            })
            .collect()
    }

    pub fn train(&self) -> Result<Vec<Sample>> {
        self.pick(&self.split.train)
    }

    pub fn test(&self) -> Result<Vec<Sample>> {
        self.pick(&self.split.test)
    }
}

/// A corrupted training sample with the plan that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoisedRecord {
    pub key: String,
    pub plan: NoisePlan,
    pub sample: Sample,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn tracks_round_trip_with_header() {
        let pts = vec![TrackPoint {
            vehicle_id: 4,
            t: 0.2,
            x: 1.0 / 3.0,
            y: 2.5,
            len: 4.5,
            wid: 1.8,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_atomic(&p, &tracks_to_csv(&pts, &comment_header("seed = 1")).unwrap()).unwrap();
        assert_eq!(read_tracks(&p).unwrap(), pts);
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        fs::write(&p, "id,t,x,y,len,wid\n1,0,0,0,1,1\n").unwrap();
        assert!(read_tracks(&p).is_err());
    }
}
