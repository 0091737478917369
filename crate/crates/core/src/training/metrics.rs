use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One completed epoch. `epoch` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_dhlr: f64,
    pub loss_floe: f64,
    pub train_clean_acc: f64,
    pub test_clean_acc: f64,
    pub train_robust_acc: f64,
    pub test_robust_acc: f64,
    /// Seconds spent in the epoch. Excluded from the CSV unless asked for,
    /// so that reruns produce byte-identical files.
    pub wall_time_s: f64,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    epoch: usize,
    lr: f64,
    loss_total: f64,
    loss_ce: f64,
    loss_dhlr: f64,
    loss_floe: f64,
    train_clean_acc: f64,
    test_clean_acc: f64,
    train_robust_acc: f64,
    test_robust_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    records: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Appends a record; epochs must follow on from the last one.
    pub fn push(&mut self, record: EpochRecord) -> Result<()> {
        let expected = self.records.last().map_or(record.epoch.max(1), |r| r.epoch + 1);
        if record.epoch != expected {
            return Err(Error::contract(format!(
                "metrics epoch {} does not follow {}",
                record.epoch,
                expected - 1
            )));
        }
        self.records.push(record);
        Ok(())
    }

    /// Same records with wall times zeroed, for trajectory comparisons.
    pub fn without_timing(&self) -> MetricsLog {
        MetricsLog {
            records: self
                .records
                .iter()
                .map(|r| EpochRecord {
                    wall_time_s: 0.0,
                    ..r.clone()
                })
                .collect(),
        }
    }

    pub fn to_csv(&self, include_wall_time: bool) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(CsvRow {
                epoch: r.epoch,
                lr: r.lr,
                loss_total: r.loss_total,
                loss_ce: r.loss_ce,
                loss_dhlr: r.loss_dhlr,
                loss_floe: r.loss_floe,
                train_clean_acc: r.train_clean_acc,
                test_clean_acc: r.test_clean_acc,
                train_robust_acc: r.train_robust_acc,
                test_robust_acc: r.test_robust_acc,
                wall_time_s: include_wall_time.then_some(r.wall_time_s),
            })
            .map_err(|e| Error::contract(e.to_string()))?;
        }
        if self.records.is_empty() {
            w.write_record(CSV_HEADER).map_err(|e| Error::contract(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path, include_wall_time: bool) -> Result<()> {
        fs::write(path, self.to_csv(include_wall_time)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let bad = |m: String| Error::Ingestion {
            file: path.to_path_buf(),
            message: m,
        };
        let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
        let mut log = MetricsLog::new();
        for row in r.deserialize::<CsvRow>() {
            let row = row.map_err(|e| bad(e.to_string()))?;
            log.push(EpochRecord {
                epoch: row.epoch,
                lr: row.lr,
                loss_total: row.loss_total,
                loss_ce: row.loss_ce,
                loss_dhlr: row.loss_dhlr,
                loss_floe: row.loss_floe,
                train_clean_acc: row.train_clean_acc,
                test_clean_acc: row.test_clean_acc,
                train_robust_acc: row.train_robust_acc,
                test_robust_acc: row.test_robust_acc,
                wall_time_s: row.wall_time_s.unwrap_or(0.0),
            })
            .map_err(|e| bad(e.to_string()))?;
        }
        Ok(log)
    }
}

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// JSON summary written next to a run's checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub objective: String,
    pub seed: u64,
    pub epochs_planned: usize,
    pub epochs_completed: usize,
    pub finished: bool,
    #[serde(default)]
    pub diverged: Option<String>,
    pub checkpoint_digest: String,
    pub total_wall_time_s: f64,
    pub records: Vec<EpochRecord>,
}

impl RunSummary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let version = v.get("schema_version").and_then(|s| s.as_u64());
        if version != Some(SUMMARY_SCHEMA_VERSION as u64) {
            return Err(Error::config(
                path.display().to_string(),
                format!("summary schema version {version:?}, expected {SUMMARY_SCHEMA_VERSION}"),
            ));
        }
        Ok(serde_json::from_value(v)?)
    }
}

const CSV_HEADER: [&str; 10] = [
    "epoch",
    "lr",
    "loss_total",
    "loss_ce",
    "loss_dhlr",
    "loss_floe",
    "train_clean_acc",
    "test_clean_acc",
    "train_robust_acc",
    "test_robust_acc",
];
