use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{aggregate_entries, ExperimentConfig, RunSummary, SeedEntry};
use crate::Result;

/// Collects the files one seed writes, as paths relative to the run root.
pub(super) struct Sink {
    root: PathBuf,
    dir: String,
    files: Vec<String>,
}

impl Sink {
    pub(super) fn new(root: &Path, dir: &str) -> Self {
        Self {
            root: root.to_path_buf(),
            dir: dir.to_string(),
            files: Vec::new(),
        }
    }

    pub(super) fn write(&mut self, name: &str, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let rel = format!("{}/{name}", self.dir);
        let mut w = BufWriter::new(File::create(self.root.join(&rel))?);
        body(&mut w)?;
        w.flush()?;
        self.files.push(rel);
        Ok(())
    }

    pub(super) fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    pub(super) fn into_files(self) -> Vec<String> {
        self.files
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    /// Every artifact of the run except the manifest, sorted by path.
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((hex::encode(hasher.finalize()), total))
}

fn write_metrics_csv(path: &Path, entries: &[SeedEntry]) -> Result<()> {
    let names: BTreeSet<&String> = entries
        .iter()
        .filter(|e| e.error.is_none())
        .flat_map(|e| e.metrics.keys())
        .collect();
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec!["seed".to_string()];
    header.extend(names.iter().map(|n| n.to_string()));
    wtr.write_record(&header)?;
    for e in entries.iter().filter(|e| e.error.is_none()) {
        let mut row = vec![e.seed.to_string()];
        row.extend(names.iter().map(|n| e.metrics.get(*n).map_or(String::new(), f64::to_string)));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub(super) fn finish(cfg: &ExperimentConfig, out: &Path, entries: Vec<SeedEntry>) -> Result<RunSummary> {
    write_metrics_csv(&out.join("metrics.csv"), &entries)?;
    let mut artifacts: Vec<String> = entries.iter().flat_map(|e| e.artifacts.iter().cloned()).collect();
    artifacts.push("metrics.csv".into());
    artifacts.push("summary.json".into());
    artifacts.sort();

    let summary = RunSummary {
        experiment: cfg.experiment,
        config: cfg.clone(),
        aggregates: aggregate_entries(&entries),
        seeds: entries,
        artifacts: artifacts.clone(),
    };
    std::fs::write(out.join("summary.json"), summary.to_json()? + "\n")?;

    let files = artifacts
        .iter()
        .map(|rel| {
            let (sha256, bytes) = sha256_file(&out.join(rel))?;
            Ok(ManifestEntry {
                path: rel.clone(),
                sha256,
                bytes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        config: cfg.clone(),
        files,
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(summary)
}
