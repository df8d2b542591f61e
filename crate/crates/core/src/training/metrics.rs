use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

/// One epoch of one phase.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_acc: Option<f64>,
}

/// Closing line of a metrics file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub phase: String,
    pub epochs: usize,
    pub final_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_test_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_test_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsLine {
    Epoch(EpochRecord),
    Summary(Summary),
}

/// Per-epoch records plus wall-clock durations. Durations are kept apart so
/// the metrics file itself is reproducible byte for byte.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub records: Vec<EpochRecord>,
    pub wall_seconds: Vec<f64>,
}

impl Metrics {
    pub fn push(&mut self, record: EpochRecord, seconds: f64) {
        self.records.push(record);
        self.wall_seconds.push(seconds);
    }

    pub fn summary(&self) -> Option<Summary> {
        let last = self.records.last()?;
        let best = self
            .records
            .iter()
            .filter_map(|r| r.test_acc)
            .fold(None, |b: Option<f64>, a| Some(b.map_or(a, |b| b.max(a))));
        Some(Summary {
            phase: last.phase.clone(),
            epochs: self.records.len(),
            final_loss: last.loss,
            final_test_acc: last.test_acc,
            best_test_acc: best,
        })
    }

    /// JSON lines: one `epoch` object per record, then a `summary`.
    pub fn to_jsonl(&self) -> String {
        let mut lines: Vec<MetricsLine> = self.records.iter().cloned().map(MetricsLine::Epoch).collect();
        lines.extend(self.summary().map(MetricsLine::Summary));
        lines
            .iter()
            .map(|l| serde_json::to_string(l).expect("metrics serialize") + "\n")
            .collect()
    }

    pub fn timing_jsonl(&self) -> String {
        self.records
            .iter()
            .zip(&self.wall_seconds)
            .map(|(r, s)| {
                let v = serde_json::json!({"phase": r.phase, "epoch": r.epoch, "wall_seconds": s});
                v.to_string() + "\n"
            })
            .collect()
    }

    /// Sidecar path for wall-clock timings.
    pub fn timing_path(path: &Path) -> PathBuf {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".timing");
        path.with_file_name(name)
    }

    /// Writes the metrics file and its timing sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))?;
        let timing = Self::timing_path(path);
        fs::write(&timing, self.timing_jsonl()).map_err(|e| Error::io(&timing, e))
    }
}
