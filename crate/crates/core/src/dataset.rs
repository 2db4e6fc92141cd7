//! On-disk datasets: one CSV per episode plus a TOML manifest.
//!
//! Episode files have header `t,u1..um,y1..yp` with `t` the sample index.
//! Quality labels live only in the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hankel::{CorruptionMode, EpisodeLabel, TrajectoryDataset, TrajectoryEpisode};

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub samples: usize,
    /// `clean` or the corruption mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant: Option<String>,
    pub m: usize,
    pub p: usize,
    pub dt: f64,
    pub episodes: Vec<ManifestEntry>,
}

fn label_text(l: &EpisodeLabel) -> String {
    match l.mode {
        Some(m) if l.corrupted => m.as_str().to_string(),
        _ if l.corrupted => "corrupted".to_string(),
        _ => "clean".to_string(),
    }
}

fn parse_label(s: &str, path: &Path) -> Result<EpisodeLabel> {
    match s {
        "clean" => Ok(EpisodeLabel::CLEAN),
        "corrupted" => Ok(EpisodeLabel {
            corrupted: true,
            mode: None,
        }),
        other => other
            .parse::<CorruptionMode>()
            .map(EpisodeLabel::corrupted)
            .map_err(|_| Error::parse(path, format!("unknown label '{other}'"))),
    }
}

/// Writes a comma-separated table.
pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[S], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(header.iter().map(|h| h.as_ref()))
        .map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a comma-separated table as header plus string rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header = r
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x}")
    }
}

fn episode_header(m: usize, p: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain((1..=m).map(|i| format!("u{i}")))
        .chain((1..=p).map(|i| format!("y{i}")))
        .collect()
}

/// Writes `data` into `dir` and returns the manifest path.
pub fn write_dataset(dir: &Path, data: &TrajectoryDataset, plant: Option<&str>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = episode_header(data.m, data.p);
    let mut entries = Vec::with_capacity(data.episodes.len());
    for (i, ep) in data.episodes.iter().enumerate() {
        let file = format!("episode_{i:03}.csv");
        let rows = (0..ep.len()).map(|k| {
            std::iter::once(k.to_string())
                .chain(ep.inputs.column(k).iter().map(|v| fmt_f64(*v)))
                .chain(ep.outputs.column(k).iter().map(|v| fmt_f64(*v)))
                .collect()
        });
        write_csv(&dir.join(&file), &header, rows)?;
        entries.push(ManifestEntry {
            file,
            samples: ep.len(),
            label: ep.label.as_ref().map(label_text),
        });
    }
    let manifest = Manifest {
        plant: plant.map(str::to_string),
        m: data.m,
        p: data.p,
        dt: data.dt,
        episodes: entries,
    };
    let path = dir.join(MANIFEST);
    let text = toml::to_string(&manifest).map_err(|e| Error::parse(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Accepts either the manifest itself or the directory holding it.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let path = manifest_path(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))
}

/// Loads a dataset written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<(TrajectoryDataset, Manifest)> {
    let mpath = manifest_path(path);
    let manifest = read_manifest(&mpath)?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let expected = episode_header(manifest.m, manifest.p);
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for entry in &manifest.episodes {
        let file = dir.join(&entry.file);
        let (header, rows) = read_csv(&file)?;
        if header != expected {
            return Err(Error::parse(&file, format!("expected header {}", expected.join(","))));
        }
        if rows.len() != entry.samples {
            return Err(Error::parse(
                &file,
                format!("manifest lists {} samples, file has {}", entry.samples, rows.len()),
            ));
        }
        let n = rows.len();
        let mut u = DMatrix::zeros(manifest.m, n);
        let mut y = DMatrix::zeros(manifest.p, n);
        for (k, row) in rows.iter().enumerate() {
            let val = |c: usize| {
                row[c]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(&file, format!("row {k}, column {c}: {e}")))
            };
            for i in 0..manifest.m {
                u[(i, k)] = val(1 + i)?;
            }
            for i in 0..manifest.p {
                y[(i, k)] = val(1 + manifest.m + i)?;
            }
        }
        let mut ep = TrajectoryEpisode::new(u, y)?;
        ep.label = entry.label.as_deref().map(|l| parse_label(l, &mpath)).transpose()?;
        episodes.push(ep);
    }
    let ds = TrajectoryDataset::new(episodes, manifest.m, manifest.p, manifest.dt)?;
    Ok((ds, manifest))
}

/// SHA-256 over the manifest and every episode file, in manifest order.
pub fn dataset_hash(path: &Path) -> Result<String> {
    let mpath = manifest_path(path);
    let manifest = read_manifest(&mpath)?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let mut h = Sha256::new();
    h.update(fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?);
    for entry in &manifest.episodes {
        let f = dir.join(&entry.file);
        h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hex(&h.finalize()))
}

/// SHA-256 of an in-memory dataset, independent of file layout.
pub fn dataset_digest(data: &TrajectoryDataset) -> String {
    let mut h = Sha256::new();
    h.update((data.m as u64).to_le_bytes());
    h.update((data.p as u64).to_le_bytes());
    h.update(data.dt.to_le_bytes());
    for ep in &data.episodes {
        h.update((ep.len() as u64).to_le_bytes());
        for v in ep.inputs.iter().chain(ep.outputs.iter()) {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::Exec;
    use crate::plants::{collect_dataset, corrupt_dataset, CorruptionSpec, Excitation, PlantConfig};

    fn sample() -> TrajectoryDataset {
        let plant = PlantConfig::from_id("cartpole").unwrap();
        collect_dataset(&plant, &Excitation::for_plant(&plant), 4, 30, 5, Exec::default()).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = corrupt_dataset(&sample(), &CorruptionSpec { fraction: 0.5, ..Default::default() }).unwrap();
        write_dataset(dir.path(), &ds, Some("cartpole")).unwrap();
        let (back, manifest) = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(manifest.plant.as_deref(), Some("cartpole"));
        assert_eq!(dataset_digest(&back), dataset_digest(&ds));
    }

    #[test]
    fn unlabelled_manifest_has_no_labels() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &sample(), None).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(!text.contains("label"));
        let head = fs::read_to_string(dir.path().join("episode_000.csv")).unwrap();
        assert!(head.starts_with("t,u1,y1,y2\n"));
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &sample(), None).unwrap();
        write_dataset(b.path(), &sample(), None).unwrap();
        assert_eq!(dataset_hash(a.path()).unwrap(), dataset_hash(b.path()).unwrap());
    }

    #[test]
    fn bad_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &sample(), None).unwrap();
        fs::write(dir.path().join("episode_001.csv"), "t,u1,y1,y2\n0,1,2,x\n").unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert_eq!(err.kind(), "parse");
        assert_eq!(read_dataset(&dir.path().join("nope")).unwrap_err().kind(), "io");
    }
}
