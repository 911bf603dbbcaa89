use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Metrics of one trained model on one fold's held-out patients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub fold: usize,
    pub seed: u64,
    pub recall: f64,
    pub precision: f64,
    pub dsc: f64,
    pub ap: f64,
}

impl MetricsRecord {
    fn values(&self) -> [f64; 4] {
        [self.recall, self.precision, self.dsc, self.ap]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub recall: f64,
    pub precision: f64,
    pub dsc: f64,
    pub ap: f64,
}

impl MetricSummary {
    fn from_array(v: [f64; 4]) -> Self {
        Self {
            recall: v[0],
            precision: v[1],
            dsc: v[2],
            ap: v[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub records: Vec<MetricsRecord>,
    pub mean: MetricSummary,
    /// Population standard deviation.
    pub std: MetricSummary,
}

/// Mean and population standard deviation of every metric.
pub fn aggregate(records: &[MetricsRecord]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot aggregate an empty record set".into(),
        ));
    }
    for r in records {
        if r.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "metrics of fold {} seed {} fall outside [0, 1]",
                r.fold, r.seed
            )));
        }
    }
    let n = records.len() as f64;
    let mut mean = [0.0; 4];
    for r in records {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v / n;
        }
    }
    let mut var = [0.0; 4];
    for r in records {
        for ((s, v), m) in var.iter_mut().zip(r.values()).zip(mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        records: records.to_vec(),
        mean: MetricSummary::from_array(mean),
        std: MetricSummary::from_array(var.map(f64::sqrt)),
    })
}

/// Writes `metrics.json` and `metrics.csv` into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    for r in &report.records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
