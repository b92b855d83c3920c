//! Per-evaluation metrics rows and their CSV form.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{ModelError, Objective};

pub const CSV_HEADER: &str = "scheme,trial,round,train_loss,test_accuracy,grad_norm_sq,rho,snr_min,wall_ms";

/// One row per (scheme, trial, evaluation round). A row whose `train_loss`
/// is NaN marks a run that diverged at `round`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scheme: String,
    pub trial: usize,
    pub round: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub grad_norm_sq: f64,
    pub rho: f64,
    pub snr_min: f64,
    pub wall_ms: f64,
}

impl MetricsRecord {
    pub fn is_divergence(&self) -> bool {
        self.train_loss.is_nan()
    }

    /// Bitwise comparison that treats NaN fields as equal.
    pub fn same_bits(&self, other: &MetricsRecord) -> bool {
        let a = [self.train_loss, self.test_accuracy, self.grad_norm_sq, self.rho, self.snr_min, self.wall_ms];
        let b = [other.train_loss, other.test_accuracy, other.grad_norm_sq, other.rho, other.snr_min, other.wall_ms];
        self.scheme == other.scheme
            && self.trial == other.trial
            && self.round == other.round
            && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()))
    }
}

/// Writes the header and one row per record. An empty list yields a
/// header-only file.
pub fn write_metrics(records: &[MetricsRecord], out: impl Write) -> Result<(), csv::Error> {
    let mut out = BufWriter::new(out);
    out.write_all(CSV_HEADER.as_bytes())?;
    out.write_all(b"\n")?;
    let mut w = csv::WriterBuilder::new().has_headers(false).terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_file(records: &[MetricsRecord], path: &Path) -> Result<(), csv::Error> {
    write_metrics(records, File::create(path)?)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, csv::Error> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().collect()
}

/// Accuracy and mean loss of `theta` on a whole split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// `None` for objectives without classes.
    pub accuracy: Option<f64>,
    pub loss: f64,
}

pub fn evaluate(objective: &dyn Objective, theta: &[f64], test: &Dataset) -> Result<Evaluation, ModelError> {
    let view = test.view();
    Ok(Evaluation { accuracy: objective.accuracy(theta, view.clone())?, loss: objective.loss(theta, view)? })
}
