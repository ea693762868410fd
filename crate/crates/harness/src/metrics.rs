//! Append-only JSONL metrics: one record per line, lossless round-trip.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub phase: String,
    pub losses: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub codebook_usage: Option<f64>,
    pub wall_ms: u64,
}

pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(MetricsLog {
            file: OpenOptions::new()
                .create(true)
                .truncate(true)
                .write(true)
                .open(path)?,
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.file, record)?;
        self.file.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_all(path: &Path) -> Result<Vec<MetricsRecord>> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut log = MetricsLog::create(&path).unwrap();
        let mut rec = MetricsRecord {
            step: 17,
            phase: "phase1".into(),
            losses: BTreeMap::new(),
            accuracy: Some(0.1250001),
            codebook_usage: None,
            wall_ms: 12345,
        };
        rec.losses.insert("l_dio".into(), 1.9459101090932196);
        rec.losses.insert("l_up".into(), f64::MIN_POSITIVE);
        log.append(&rec).unwrap();
        let back = MetricsLog::read_all(&path).unwrap();
        assert_eq!(back, vec![rec]);
    }
}
