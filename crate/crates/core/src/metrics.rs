//! Per-epoch training metrics and their CSV form.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rules::N_RULES;

pub const CSV_HEADER: &str = "epoch,train_loss,test_loss,acc_mad,acc_ghunnah,acc_ikhfaa";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    /// Per-rule test accuracy in rule order.
    pub test_accuracy: [f64; N_RULES],
}

impl EpochMetrics {
    /// One CSV row. Values use Rust's shortest round-trip float formatting,
    /// so parsing a row gives back identical numbers.
    pub fn csv_row(&self) -> String {
        let [a, b, c] = self.test_accuracy;
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.test_loss, a, b, c
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(Error::Invalid(format!("metrics row needs 6 fields: {line:?}")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Invalid(format!("bad number {s:?} in metrics row")))
        };
        Ok(Self {
            epoch: f[0]
                .parse()
                .map_err(|_| Error::Invalid(format!("bad epoch {:?}", f[0])))?,
            train_loss: num(f[1])?,
            test_loss: num(f[2])?,
            test_accuracy: [num(f[3])?, num(f[4])?, num(f[5])?],
        })
    }
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for m in metrics {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(metrics)).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text)
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Invalid(format!("metrics file must start with `{CSV_HEADER}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(EpochMetrics::parse_row)
        .collect()
}

/// Append-only metrics log that is flushed after every epoch.
pub struct MetricsLog {
    file: std::fs::File,
    path: std::path::PathBuf,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{CSV_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(self.file, "{}", m.csv_row())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}
