//! Per-epoch metrics: an in-memory record plus an append-as-you-go
//! JSON-lines file so partial runs still leave usable logs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One epoch of one stage. `components` holds the raw (unweighted) loss
/// component means in f64; `total` is the weighted training objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub components: BTreeMap<String, f64>,
    pub total: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    pub wall_time_s: f64,
}

/// Writes records to a JSON-lines file as they arrive (when a path is given)
/// and keeps them all in memory for the caller.
pub struct MetricsWriter {
    file: Option<BufWriter<File>>,
    records: Vec<EpochRecord>,
}

impl MetricsWriter {
    pub fn new(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    if !parent.as_os_str().is_empty() {
                        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                    }
                }
                Some(BufWriter::new(
                    File::create(p).map_err(|e| Error::io(p, e))?,
                ))
            }
            None => None,
        };
        Ok(MetricsWriter {
            file,
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, record: EpochRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&record).map_err(|e| Error::Serde(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io("metrics file", e))?;
            f.flush().map_err(|e| Error::io("metrics file", e))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EpochRecord> {
        self.records
    }
}

/// Read a JSON-lines metrics file back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Serde(e.to_string()))?);
    }
    Ok(out)
}
