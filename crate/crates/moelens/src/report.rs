//! CSV and JSON outputs.
//!
//! Every study writes a long-format CSV with the columns
//! `study,layer,key,metric,value`; some also write a wide CSV with one row per
//! observation. `layer` is the layer index, or `all` for pooled rows; `key`
//! identifies the row within the layer (a sequence id, a pair, a grid point).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct LongRow {
    pub study: String,
    pub layer: String,
    pub key: String,
    pub metric: String,
    pub value: f64,
}

pub const LONG_COLUMNS: [&str; 5] = ["study", "layer", "key", "metric", "value"];

impl LongRow {
    pub fn new(study: &str, layer: impl ToString, key: impl Into<String>, metric: &str, value: f64) -> Self {
        Self {
            study: study.into(),
            layer: layer.to_string(),
            key: key.into(),
            metric: metric.into(),
            value,
        }
    }
}

/// Collects the rows of one study.
#[derive(Debug, Default)]
pub struct LongTable {
    study: String,
    pub rows: Vec<LongRow>,
}

impl LongTable {
    pub fn new(study: &str) -> Self {
        Self {
            study: study.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, layer: impl ToString, key: impl Into<String>, metric: &str, value: f64) {
        self.rows.push(LongRow::new(&self.study, layer, key, metric, value));
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Like [`write_csv`] but always writes the header, even with no rows.
pub fn write_long(path: &Path, rows: &[LongRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    if rows.is_empty() {
        w.write_record(LONG_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Files written by one command, in write order.
#[derive(Debug, Default)]
pub struct Outputs {
    dir: PathBuf,
    pub files: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn claim(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    pub fn long(&mut self, name: &str, rows: &[LongRow]) -> anyhow::Result<()> {
        let p = self.claim(name);
        write_long(&p, rows)
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> anyhow::Result<()> {
        let p = self.claim(name);
        write_csv(&p, rows)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let p = self.claim(name);
        write_json(&p, value)
    }
}
