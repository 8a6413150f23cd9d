//! CSV and JSON writers for evaluation reports and loss histories.

use std::path::Path;

use odeformer_core::eval::MetricsReport;
use odeformer_core::train::EpochStats;
use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;
use crate::error::{Error, Result};

/// One row of the report CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub speed_mps: f64,
    pub interval_pattern: String,
    pub predictor: String,
    pub mean_nmse: f64,
    pub nmse_db: f64,
    pub n_samples: usize,
}

impl From<&MetricsReport> for ReportRow {
    fn from(r: &MetricsReport) -> Self {
        Self {
            speed_mps: r.speed_mps,
            interval_pattern: r.interval_pattern.clone(),
            predictor: r.predictor.clone(),
            mean_nmse: r.mean_nmse,
            nmse_db: r.nmse_db,
            n_samples: r.n_samples,
        }
    }
}

/// Empirical error CDF of one predictor in one sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfEntry {
    pub predictor: String,
    pub speed_mps: f64,
    pub interval_pattern: String,
    pub points: Vec<[f64; 2]>,
}

impl From<&MetricsReport> for CdfEntry {
    fn from(r: &MetricsReport) -> Self {
        Self {
            predictor: r.predictor.clone(),
            speed_mps: r.speed_mps,
            interval_pattern: r.interval_pattern.clone(),
            points: r.cdf.iter().map(|&(e, p)| [e, p]).collect(),
        }
    }
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    train_nmse: f64,
    val_nmse: Option<f64>,
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>, header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let fail = |e: csv::Error| Error::malformed("csv output", e);
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::malformed("csv output", e))
}

const REPORT_HEADER: [&str; 6] = ["speed_mps", "interval_pattern", "predictor", "mean_nmse", "nmse_db", "n_samples"];

pub fn write_report_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    write_atomic(path, &csv_bytes(reports.iter().map(ReportRow::from), &REPORT_HEADER)?)
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::MissingFile(path.into()),
        _ => Error::malformed("report csv", e),
    })?;
    r.deserialize().map(|row| row.map_err(|e| Error::malformed("report csv", e))).collect()
}

pub fn write_cdf_json(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let entries: Vec<CdfEntry> = reports.iter().map(CdfEntry::from).collect();
    let json = serde_json::to_vec_pretty(&entries).map_err(|e| Error::malformed("cdf json", e))?;
    write_atomic(path, &json)
}

/// `epoch,train_nmse,val_nmse`; `val_nmse` is empty when no validation set
/// was given.
pub fn write_loss_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let rows = history.iter().map(|s| LossRow {
        epoch: s.epoch,
        train_nmse: s.train_nmse,
        val_nmse: s.val_nmse,
    });
    write_atomic(path, &csv_bytes(rows, &["epoch", "train_nmse", "val_nmse"])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn report(p: &str) -> MetricsReport {
        MetricsReport {
            predictor: p.into(),
            speed_mps: 10.0,
            interval_pattern: "{1,2,3}x4:1".into(),
            n_samples: 2,
            mean_nmse: 0.25,
            nmse_db: -6.0206,
            cdf: vec![(0.1, 0.5), (0.4, 1.0)],
        }
    }

    #[test]
    fn report_csv_round_trips_with_quoted_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_report_csv(&p, &[report("hold"), report("linear")]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("speed_mps,interval_pattern,predictor,mean_nmse,nmse_db,n_samples\n"));
        assert!(text.contains("\"{1,2,3}x4:1\""));
        let rows = read_report_csv(&p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1], ReportRow::from(&report("linear")));
    }

    #[test]
    fn cdf_json_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        write_cdf_json(&p, &[report("hold")]).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        assert_eq!(v[0]["predictor"], "hold");
        assert_eq!(v[0]["points"], serde_json::json!([[0.1, 0.5], [0.4, 1.0]]));
    }

    #[test]
    fn loss_csv_leaves_missing_validation_blank() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        let h = [
            EpochStats { epoch: 0, train_nmse: 0.5, val_nmse: None },
            EpochStats { epoch: 1, train_nmse: 0.25, val_nmse: Some(0.3) },
        ];
        write_loss_csv(&p, &h).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "epoch,train_nmse,val_nmse\n0,0.5,\n1,0.25,0.3\n");
    }
}
