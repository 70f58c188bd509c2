//! The full classifier: EfficientNet-B0 features, global average pooling, an
//! optional squeeze-excitation gate on the pooled vector, dropout and a
//! three-logit linear head.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::efficientnet::{EfficientNetB0, FEATURE_CHANNELS};
use super::params::{Init, ParamStore};
use crate::dsp::{CHANNELS, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::rules::N_RULES;

/// Where the weights for `--backbone-weights` are expected to come from.
pub const PRETRAINED_SOURCE: &str = "torchvision efficientnet_b0 (IMAGENET1K_V1)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SePlacement {
    None,
    AfterPool,
    /// Reserved name; building a model with it fails.
    BeforePool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
    UniformFanIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: String,
    pub feature_channels: usize,
    pub se_placement: SePlacement,
    pub se_reduction: usize,
    pub dropout_p: f64,
    pub n_outputs: usize,
    pub head_init: HeadInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: "efficientnet_b0".into(),
            feature_channels: FEATURE_CHANNELS,
            se_placement: SePlacement::AfterPool,
            se_reduction: 16,
            dropout_p: 0.7,
            n_outputs: N_RULES,
            head_init: HeadInit::UniformFanIn,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.backbone != "efficientnet_b0" {
            return fail(format!("unsupported backbone {:?}", self.backbone));
        }
        if self.feature_channels != FEATURE_CHANNELS {
            return fail(format!("efficientnet_b0 has {FEATURE_CHANNELS} feature channels"));
        }
        if self.se_reduction == 0 || !self.feature_channels.is_multiple_of(self.se_reduction) {
            return fail("feature_channels must be divisible by se_reduction".into());
        }
        if self.se_placement == SePlacement::BeforePool {
            return fail("se_placement = before_pool is reserved and not implemented".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail("dropout_p must be in [0, 1)".into());
        }
        if self.n_outputs != N_RULES {
            return fail(format!("n_outputs must be {N_RULES}"));
        }
        Ok(())
    }

    pub fn se_hidden(&self) -> usize {
        self.feature_channels / self.se_reduction
    }
}

/// How the backbone parameters are initialised when building a fresh model.
#[derive(Debug, Clone, PartialEq)]
pub enum BackboneInit {
    /// A safetensors export of the torchvision `efficientnet_b0` state dict.
    Pretrained(PathBuf),
    /// Seeded random initialisation (torchvision's scheme).
    Random,
}

/// `v * sigmoid(W2 relu(W1 v + b1) + b2)` for `v: (B, C)`, `W1: (C/r, C)`,
/// `W2: (C, C/r)`. Works for any float dtype.
pub fn se_gate(v: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Tensor> {
    Ok(v.mul(&se_gates(v, w1, b1, w2, b2)?)?)
}

/// The gate vector alone.
pub fn se_gates(v: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Tensor> {
    let h = v.matmul(&w1.t()?)?.broadcast_add(b1)?.relu()?;
    Ok(candle_nn::ops::sigmoid(&h.matmul(&w2.t()?)?.broadcast_add(b2)?)?)
}

struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    fn new(ps: &mut ParamStore, prefix: &str, out: usize, inp: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.get(&format!("{prefix}.weight"), &[out, inp], Init::UniformFanIn)?,
            bias: ps.get(&format!("{prefix}.bias"), &[out], Init::Const(0.0))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

struct SeBlock {
    reduce: Linear,
    expand: Linear,
}

impl SeBlock {
    fn forward(&self, v: &Tensor) -> Result<Tensor> {
        se_gate(
            v,
            &self.reduce.weight,
            &self.reduce.bias,
            &self.expand.weight,
            &self.expand.bias,
        )
    }
}

pub struct TajweedNet {
    cfg: ModelConfig,
    params: ParamStore,
    backbone: EfficientNetB0,
    se: Option<SeBlock>,
    head: Linear,
}

/// Safetensors names that carry no parameter this model uses.
fn ignorable(name: &str) -> bool {
    name.ends_with("num_batches_tracked") || name.starts_with("classifier.")
}

fn load_pretrained(path: &Path, device: &Device) -> Result<HashMap<String, Tensor>> {
    let err = |msg: String| Error::PretrainedWeights {
        source_name: PRETRAINED_SOURCE.into(),
        msg,
    };
    if !path.is_file() {
        return Err(err(format!(
            "{} not found; export the torchvision state dict to safetensors at this path \
             or build with random backbone initialisation",
            path.display()
        )));
    }
    let tensors =
        candle_core::safetensors::load(path, device).map_err(|e| err(format!("{}: {e}", path.display())))?;
    Ok(tensors.into_iter().filter(|(k, _)| !ignorable(k)).collect())
}

impl TajweedNet {
    /// Builds a fresh model. The SE and head parameters are always newly
    /// initialised from `seed`; the backbone comes from `init`.
    pub fn build(cfg: &ModelConfig, init: &BackboneInit, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let ps = match init {
            BackboneInit::Random => ParamStore::fresh(seed, &device),
            BackboneInit::Pretrained(path) => {
                ParamStore::with_preset(load_pretrained(path, &device)?, true, seed, &device)
            }
        };
        let net = Self::assemble(cfg, ps, false)?;
        let unused = net.params.unused_preset();
        if !unused.is_empty() {
            return Err(Error::PretrainedWeights {
                source_name: PRETRAINED_SOURCE.into(),
                msg: format!("unexpected tensors: {}", unused.join(", ")),
            });
        }
        Ok(net)
    }

    /// Builds a model whose every parameter comes from `tensors`.
    pub(crate) fn from_tensors(cfg: &ModelConfig, tensors: HashMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let ps = ParamStore::with_preset(tensors, true, 0, &Device::Cpu);
        let net = Self::assemble(cfg, ps, true).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let unused = net.params.unused_preset();
        if !unused.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has tensors the model does not use: {}",
                unused.join(", ")
            )));
        }
        Ok(net)
    }

    fn assemble(cfg: &ModelConfig, mut ps: ParamStore, head_from_preset: bool) -> Result<Self> {
        let backbone = EfficientNetB0::new(&mut ps)?;
        if !head_from_preset {
            // A pretrained preset only covers the feature extractor.
            ps.set_strict(false);
        }
        let c = cfg.feature_channels;
        let se = match cfg.se_placement {
            SePlacement::AfterPool => Some(SeBlock {
                reduce: Linear::new(&mut ps, "se.reduce", cfg.se_hidden(), c)?,
                expand: Linear::new(&mut ps, "se.expand", c, cfg.se_hidden())?,
            }),
            SePlacement::None => None,
            SePlacement::BeforePool => unreachable!("rejected by validate"),
        };
        let head = Linear::new(&mut ps, "head", cfg.n_outputs, c)?;
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            backbone,
            se,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    fn check_input(x: &Tensor) -> Result<()> {
        match x.dims() {
            [_, c, h, w] if *c == CHANNELS && *h == IMAGE_SIZE && *w == IMAGE_SIZE => Ok(()),
            d => Err(Error::Shape(format!(
                "expected a batch of {IMAGE_SIZE}x{IMAGE_SIZE}x{CHANNELS} tensors \
                 (B, {CHANNELS}, {IMAGE_SIZE}, {IMAGE_SIZE}), got {d:?}"
            ))),
        }
    }

    /// Pooled backbone features `(B, 1280)`.
    pub fn pooled(&self, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        Self::check_input(x)?;
        self.backbone.pooled(&x.to_dtype(DType::F32)?, rng)
    }

    /// The vector that reaches dropout and the head: pooled features, gated
    /// by the SE block when present.
    pub fn embed(&self, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let v = self.pooled(x, rng)?;
        match &self.se {
            Some(se) => se.forward(&v),
            None => Ok(v),
        }
    }

    /// Logits `(B, 3)`. Passing an rng selects training mode: batch-norm batch
    /// statistics, stochastic depth and dropout all draw from it.
    pub fn forward_t(&self, x: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let v = self.embed(x, rng.as_deref_mut())?;
        let v = match rng {
            Some(rng) if self.cfg.dropout_p > 0.0 => dropout(&v, self.cfg.dropout_p, rng)?,
            _ => v,
        };
        self.head_forward(&v)
    }

    /// Evaluation-mode logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_t(x, None)
    }

    /// The final linear layer on its own.
    pub fn head_forward(&self, v: &Tensor) -> Result<Tensor> {
        self.head.forward(v)
    }
}

/// Inverted dropout with a mask drawn from `rng`.
pub fn dropout(x: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let keep = 1.0 - p;
    let scale = (1.0 / keep) as f32;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}
