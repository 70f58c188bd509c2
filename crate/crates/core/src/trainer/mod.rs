//! Training loop, batch assembly and thresholded prediction.

mod loss;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{bce_term, compute_pos_weights, weighted_bce_logits};

use crate::dsp::{DspConfig, SpectrogramTensor, TensorCache, CHANNELS, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::ingest::{ClipRecord, DatasetSplit};
use crate::metrics::{EpochMetrics, MetricsLog};
use crate::model::checkpoint::{save_checkpoint, CheckpointHeader};
use crate::model::TajweedNet;
use crate::rules::N_RULES;

pub const CHECKPOINT_BEST: &str = "checkpoint_best";
pub const CHECKPOINT_FINAL: &str = "checkpoint_final";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_weights: [f64; N_RULES],
    pub seed: u64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            epochs: 40,
            batch_size: 16,
            loss_weights: [1.0, 0.19, 0.95],
            seed: 42,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        compute_pos_weights(&self.loss_weights)?;
        if self.epochs == 0 {
            return Err(Error::Config("train: epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train: learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("train: threshold must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn pos_weights(&self) -> Result<[f64; N_RULES]> {
        compute_pos_weights(&self.loss_weights)
    }
}

/// Anything that can hand out the preprocessed tensor of a clip.
pub trait TensorSource: Sync {
    fn tensor(&self, clip_id: &str) -> Result<SpectrogramTensor>;
}

impl TensorSource for TensorCache {
    fn tensor(&self, clip_id: &str) -> Result<SpectrogramTensor> {
        self.get(clip_id)
    }
}

impl TensorSource for HashMap<String, SpectrogramTensor> {
    fn tensor(&self, clip_id: &str) -> Result<SpectrogramTensor> {
        self.get(clip_id)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("no tensor for clip {clip_id}")))
    }
}

/// Stacks tensors into a `(B, 3, 224, 224)` network input.
pub fn stack_inputs(tensors: &[SpectrogramTensor], device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(tensors.len() * SpectrogramTensor::LEN);
    for t in tensors {
        data.extend(t.to_chw());
    }
    Ok(Tensor::from_vec(
        data,
        (tensors.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE),
        device,
    )?)
}

/// Inputs and `(B, 3)` targets for a batch of records.
pub fn load_batch(
    records: &[&ClipRecord],
    source: &dyn TensorSource,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    let tensors = records
        .iter()
        .map(|r| source.tensor(&r.clip_id))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<f32> = records
        .iter()
        .flat_map(|r| r.labels.to_array().map(f32::from))
        .collect();
    Ok((
        stack_inputs(&tensors, device)?,
        Tensor::from_vec(targets, (records.len(), N_RULES), device)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RulePrediction {
    /// Sigmoid of each logit, kept strictly inside (0, 1).
    pub probabilities: [f64; N_RULES],
    pub verdicts: [bool; N_RULES],
}

/// Probability and `p >= threshold` verdict for each logit row.
pub fn predictions_from_logits(logits: &Tensor, threshold: f64) -> Result<Vec<RulePrediction>> {
    let rows = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows
        .into_iter()
        .map(|row| {
            let mut p = [0f64; N_RULES];
            let mut v = [false; N_RULES];
            for j in 0..N_RULES {
                let s = 1.0 / (1.0 + (-row[j]).exp());
                p[j] = s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
                v[j] = p[j] >= threshold;
            }
            RulePrediction {
                probabilities: p,
                verdicts: v,
            }
        })
        .collect())
}

/// Evaluation-mode prediction for a stacked batch.
pub fn predict_batch(net: &TajweedNet, inputs: &Tensor, threshold: f64) -> Result<Vec<RulePrediction>> {
    predictions_from_logits(&net.forward(inputs)?, threshold)
}

/// Evaluation-mode pass over a set of records.
#[derive(Debug, Clone)]
pub struct SplitEvaluation {
    pub loss: f64,
    pub accuracy: [f64; N_RULES],
    pub predictions: Vec<RulePrediction>,
}

pub fn evaluate_records(
    net: &TajweedNet,
    records: &[ClipRecord],
    source: &dyn TensorSource,
    batch_size: usize,
    pos_weights: &[f64; N_RULES],
    threshold: f64,
) -> Result<SplitEvaluation> {
    if records.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty set of clips".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = [0usize; N_RULES];
    let mut predictions = Vec::with_capacity(records.len());
    let refs: Vec<&ClipRecord> = records.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (x, y) = load_batch(chunk, source, net.device())?;
        let logits = net.forward(&x)?;
        let l = weighted_bce_logits(&logits, &y, pos_weights)?.to_scalar::<f32>()?;
        loss_sum += f64::from(l) * chunk.len() as f64;
        for (rec, p) in chunk.iter().zip(predictions_from_logits(&logits, threshold)?) {
            for (j, &label) in rec.labels.to_array().iter().enumerate() {
                correct[j] += usize::from(p.verdicts[j] == (label == 1));
            }
            predictions.push(p);
        }
    }
    let n = records.len() as f64;
    Ok(SplitEvaluation {
        loss: loss_sum / n,
        accuracy: correct.map(|c| c as f64 / n),
        predictions,
    })
}

/// What `train` leaves behind.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub final_model_id: String,
}

fn adam(net: &TajweedNet, lr: f64) -> Result<AdamW> {
    // AdamW without weight decay is plain Adam (betas 0.9/0.999, eps 1e-8).
    Ok(AdamW::new(
        net.params().trainable_vars(),
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

/// Trains `net` on `split.train` for `cfg.epochs` epochs, evaluating on
/// `split.test` after each epoch. Writes `metrics.csv`, `checkpoint_best`
/// (lowest test loss) and `checkpoint_final` into `run_dir`.
pub fn train(
    net: &TajweedNet,
    split: &DatasetSplit,
    source: &dyn TensorSource,
    cfg: &TrainConfig,
    dsp: &DspConfig,
    run_dir: &Path,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    if split.test.is_empty() {
        return Err(Error::Invalid("test split is empty".into()));
    }
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let pos_weights = cfg.pos_weights()?;
    let mut opt = adam(net, cfg.learning_rate)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model_rng.set_stream(1);

    let mut log = MetricsLog::create(&run_dir.join(METRICS_FILE))?;
    let best_path = run_dir.join(CHECKPOINT_BEST);
    let final_path = run_dir.join(CHECKPOINT_FINAL);
    let header = |epoch| CheckpointHeader {
        model: net.config().clone(),
        dsp: dsp.clone(),
        seed: cfg.seed,
        epoch,
    };

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0usize);
    let mut order: Vec<&ClipRecord> = split.train.iter().collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = load_batch(batch, source, net.device())?;
            let logits = net.forward_t(&x, Some(&mut model_rng))?;
            let loss = weighted_bce_logits(&logits, &y, &pos_weights)?;
            let value = f64::from(loss.to_scalar::<f32>()?);
            if !value.is_finite() {
                let ids: Vec<String> = batch.iter().map(|r| r.clip_id.clone()).collect();
                let snapshot = serde_json::json!({ "epoch": epoch, "batch": ids, "loss": value.to_string() });
                let path = run_dir.join("diverged.json");
                std::fs::write(&path, snapshot.to_string()).map_err(|e| Error::io(&path, e))?;
                return Err(Error::NonFiniteLoss { epoch, batch_ids: ids });
            }
            opt.backward_step(&loss)?;
            loss_sum += value * batch.len() as f64;
        }
        let eval = evaluate_records(
            net,
            &split.test,
            source,
            cfg.batch_size,
            &pos_weights,
            cfg.threshold,
        )?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / split.train.len() as f64,
            test_loss: eval.loss,
            test_accuracy: eval.accuracy,
        };
        log.append(&m)?;
        if m.test_loss < best.0 {
            best = (m.test_loss, epoch);
            save_checkpoint(net, &header(epoch), &best_path)?;
        }
        tracing::info!(
            epoch,
            train_loss = m.train_loss,
            test_loss = m.test_loss,
            acc = ?m.test_accuracy,
            "epoch done"
        );
        on_epoch(&m);
        metrics.push(m);
    }
    let final_model_id = save_checkpoint(net, &header(cfg.epochs), &final_path)?;
    Ok(TrainOutcome {
        metrics,
        best_epoch: best.1,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
        final_model_id,
    })
}

/// One Adam step on a fixed batch in evaluation mode. Returns the batch loss
/// before the step.
pub fn eval_mode_step(
    net: &TajweedNet,
    x: &Tensor,
    y: &Tensor,
    pos_weights: &[f64; N_RULES],
    lr: f64,
) -> Result<f64> {
    let mut opt = adam(net, lr)?;
    let loss = weighted_bce_logits(&net.forward(x)?, y, pos_weights)?;
    let before = f64::from(loss.to_scalar::<f32>()?);
    opt.backward_step(&loss)?;
    Ok(before)
}
