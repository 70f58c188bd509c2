//! Accuracy, confusion matrices, the evaluation report and learning-curve
//! exports.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::ClipRecord;
use crate::metrics::{write_metrics_csv, EpochMetrics};
use crate::model::LoadedCheckpoint;
use crate::rules::{N_RULES, RULES};
use crate::trainer::{evaluate_records, TensorSource};

pub type Labels = [u8; N_RULES];

/// Per-rule share of matching entries.
pub fn accuracy(preds: &[Labels], labels: &[Labels]) -> Result<[f64; N_RULES]> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "accuracy needs equally long, nonempty inputs ({} predictions, {} labels)",
            preds.len(),
            labels.len()
        )));
    }
    let mut hits = [0usize; N_RULES];
    for (p, l) in preds.iter().zip(labels) {
        for j in 0..N_RULES {
            hits[j] += usize::from(p[j] == l[j]);
        }
    }
    Ok(hits.map(|h| h as f64 / preds.len() as f64))
}

/// Fraction of clips with all three rules right.
pub fn subset_accuracy(preds: &[Labels], labels: &[Labels]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Shape("subset accuracy needs equally long, nonempty inputs".into()));
    }
    let exact = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(exact as f64 / preds.len() as f64)
}

pub fn mean_accuracy(acc: &[f64; N_RULES]) -> f64 {
    acc.iter().sum::<f64>() / N_RULES as f64
}

/// `[[TN, FP], [FN, TP]]` for one rule.
pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<[[usize; 2]; 2]> {
    if preds.len() != labels.len() {
        return Err(Error::Shape("confusion inputs differ in length".into()));
    }
    let mut m = [[0usize; 2]; 2];
    for (&p, &l) in preds.iter().zip(labels) {
        if p > 1 || l > 1 {
            return Err(Error::Invalid(format!("non-binary value in confusion input ({p}, {l})")));
        }
        m[usize::from(l)][usize::from(p)] += 1;
    }
    Ok(m)
}

/// Percentage with two decimals, e.g. `0.95348` → `"95.35"`.
pub fn percent(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

pub fn manifest_hash(manifest_csv: &str) -> String {
    hex::encode(Sha256::digest(manifest_csv.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleReport {
    pub rule: String,
    pub accuracy: f64,
    pub accuracy_percent: String,
    /// `[[TN, FP], [FN, TP]]`.
    pub confusion: [[usize; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rules: Vec<RuleReport>,
    pub per_rule_accuracy: [f64; N_RULES],
    pub average_accuracy: f64,
    pub average_accuracy_percent: String,
    /// Supplementary: all three rules correct.
    pub subset_accuracy: f64,
    pub test_loss: f64,
    pub n_clips: usize,
    pub checkpoint_id: String,
    pub split_manifest_hash: String,
    pub dsp_config_hash: String,
    pub threshold: f64,
}

impl EvalReport {
    pub fn from_predictions(
        preds: &[Labels],
        labels: &[Labels],
        test_loss: f64,
        checkpoint_id: &str,
        split_manifest_hash: &str,
        dsp_config_hash: &str,
        threshold: f64,
    ) -> Result<Self> {
        let acc = accuracy(preds, labels)?;
        let rules = RULES
            .iter()
            .enumerate()
            .map(|(j, r)| {
                let p: Vec<u8> = preds.iter().map(|x| x[j]).collect();
                let l: Vec<u8> = labels.iter().map(|x| x[j]).collect();
                Ok(RuleReport {
                    rule: r.column.to_string(),
                    accuracy: acc[j],
                    accuracy_percent: percent(acc[j]),
                    confusion: confusion(&p, &l)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let avg = mean_accuracy(&acc);
        Ok(Self {
            rules,
            per_rule_accuracy: acc,
            average_accuracy: avg,
            average_accuracy_percent: percent(avg),
            subset_accuracy: subset_accuracy(preds, labels)?,
            test_loss,
            n_clips: preds.len(),
            checkpoint_id: checkpoint_id.to_string(),
            split_manifest_hash: split_manifest_hash.to_string(),
            dsp_config_hash: dsp_config_hash.to_string(),
            threshold,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Evaluates a loaded checkpoint on `records` (normally the test split).
pub fn evaluate_checkpoint(
    ckpt: &LoadedCheckpoint,
    records: &[ClipRecord],
    source: &dyn TensorSource,
    pos_weights: &[f64; N_RULES],
    threshold: f64,
    batch_size: usize,
    split_manifest_hash: &str,
) -> Result<EvalReport> {
    let eval = evaluate_records(&ckpt.net, records, source, batch_size, pos_weights, threshold)?;
    let preds: Vec<Labels> = eval
        .predictions
        .iter()
        .map(|p| p.verdicts.map(u8::from))
        .collect();
    let labels: Vec<Labels> = records.iter().map(|r| r.labels.to_array()).collect();
    EvalReport::from_predictions(
        &preds,
        &labels,
        eval.loss,
        &ckpt.model_id,
        split_manifest_hash,
        &ckpt.header.dsp.hash(),
        threshold,
    )
}

/// Whether the last epoch has the lowest test loss of the run.
pub fn final_test_loss_is_minimum(metrics: &[EpochMetrics]) -> Result<bool> {
    let last = metrics
        .last()
        .ok_or_else(|| Error::Invalid("no epochs recorded".into()))?;
    Ok(metrics.iter().all(|m| last.test_loss <= m.test_loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub epochs: usize,
    pub final_test_loss_is_minimum: bool,
    pub min_test_loss_epoch: usize,
}

/// Writes `metrics.csv`, `curves.png` and `curves.json` into `out_dir`.
pub fn export_learning_curves(metrics: &[EpochMetrics], out_dir: &Path) -> Result<CurveSummary> {
    let flag = final_test_loss_is_minimum(metrics)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_metrics_csv(metrics, &out_dir.join("metrics.csv"))?;
    let png = out_dir.join("curves.png");
    render_curves(metrics)
        .save(&png)
        .map_err(|e| Error::io(&png, std::io::Error::other(e)))?;
    let min_epoch = metrics
        .iter()
        .min_by(|a, b| a.test_loss.total_cmp(&b.test_loss))
        .map(|m| m.epoch)
        .unwrap_or(0);
    let summary = CurveSummary {
        epochs: metrics.len(),
        final_test_loss_is_minimum: flag,
        min_test_loss_epoch: min_epoch,
    };
    let json = out_dir.join("curves.json");
    std::fs::write(&json, serde_json::to_string_pretty(&summary).expect("serialises"))
        .map_err(|e| Error::io(&json, e))?;
    Ok(summary)
}

const W: u32 = 960;
const H: u32 = 400;
const MARGIN: u32 = 30;

/// Two panels: losses on the left (train blue, test red), per-rule test
/// accuracy on the right (one colour per rule), each scaled to its data.
pub fn render_curves(metrics: &[EpochMetrics]) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let panel_w = W / 2;
    let losses: [(Vec<f64>, Rgb<u8>); 2] = [
        (metrics.iter().map(|m| m.train_loss).collect(), Rgb([31, 119, 180])),
        (metrics.iter().map(|m| m.test_loss).collect(), Rgb([214, 39, 40])),
    ];
    let accs: Vec<(Vec<f64>, Rgb<u8>)> = [Rgb([44, 160, 44]), Rgb([148, 103, 189]), Rgb([255, 127, 14])]
        .into_iter()
        .enumerate()
        .map(|(j, c)| (metrics.iter().map(|m| m.test_accuracy[j]).collect(), c))
        .collect();
    draw_panel(&mut img, 0, panel_w, &losses);
    draw_panel(&mut img, panel_w, panel_w, &accs);
    img
}

fn draw_panel(img: &mut RgbImage, x0: u32, width: u32, series: &[(Vec<f64>, Rgb<u8>)]) {
    let (left, right) = (x0 + MARGIN, x0 + width - MARGIN);
    let (top, bottom) = (MARGIN, H - MARGIN);
    let grey = Rgb([120, 120, 120]);
    for x in left..=right {
        img.put_pixel(x, bottom, grey);
        img.put_pixel(x, top, grey);
    }
    for y in top..=bottom {
        img.put_pixel(left, y, grey);
        img.put_pixel(right, y, grey);
    }
    let finite = series.iter().flat_map(|(v, _)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (values, colour) in series {
        let n = values.len();
        let point = |i: usize, v: f64| -> (f64, f64) {
            let fx = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            let fy = (v - lo) / span;
            (
                f64::from(left) + fx * f64::from(right - left),
                f64::from(bottom) - fy * f64::from(bottom - top),
            )
        };
        let pts: Vec<(f64, f64)> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| point(i, v))
            .collect();
        for w in pts.windows(2) {
            draw_line(img, w[0], w[1], *colour);
        }
        for &(x, y) in &pts {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    put(img, x + f64::from(dx), y + f64::from(dy), *colour);
                }
            }
        }
    }
}

fn put(img: &mut RgbImage, x: f64, y: f64, c: Rgb<u8>) {
    let (x, y) = (x.round(), y.round());
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        put(img, a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), c);
    }
}
