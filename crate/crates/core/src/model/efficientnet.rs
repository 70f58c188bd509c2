//! EfficientNet-B0 feature extractor with torchvision parameter names, so that
//! an exported `efficientnet_b0` state dict loads without renaming.

use candle_core::{Tensor, Var};
use candle_nn::ops::sigmoid;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::depthwise::{depthwise_conv2d, DepthwiseGeometry};
use super::fused::{channel_moments, BatchNormAct, ChannelScale};
use super::params::{Init, ParamStore};
use crate::error::Result;

pub const FEATURE_CHANNELS: usize = 1280;
const STOCHASTIC_DEPTH: f64 = 0.2;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// (expand ratio, kernel, stride, in, out, repeats) for the seven MBConv stages.
const STAGES: [(usize, usize, usize, usize, usize, usize); 7] = [
    (1, 3, 1, 32, 16, 1),
    (6, 3, 2, 16, 24, 2),
    (6, 5, 2, 24, 40, 2),
    (6, 3, 2, 40, 80, 3),
    (6, 5, 1, 80, 112, 3),
    (6, 5, 2, 112, 192, 4),
    (6, 3, 1, 192, 320, 1),
];

enum ConvKind {
    Stem { stride: usize, padding: usize },
    Pointwise,
    Depthwise(DepthwiseGeometry),
}

/// Batch norm over NCHW input with the activation folded into the same kernel.
struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm2d {
    fn new(ps: &mut ParamStore, prefix: &str, c: usize) -> Result<Self> {
        Ok(Self {
            running_mean: ps.buffer(&format!("{prefix}.running_mean"), &[c], Init::Const(0.0))?,
            running_var: ps.buffer(&format!("{prefix}.running_var"), &[c], Init::Const(1.0))?,
            weight: ps.get(&format!("{prefix}.weight"), &[c], Init::Const(1.0))?,
            bias: ps.get(&format!("{prefix}.bias"), &[c], Init::Const(0.0))?,
        })
    }

    fn forward_t(&self, x: &Tensor, silu: bool, train: bool) -> Result<Tensor> {
        let (mean, var) = if train {
            let (mean, var) = channel_moments(x)?;
            let (b, _, h, w) = x.dims4()?;
            let n = (b * h * w) as f32;
            let unbiased = n / (n - 1.0).max(1.0);
            let m = BN_MOMENTUM as f32;
            let blend = |running: &Var, batch: Vec<f32>, corr: f32| -> Result<()> {
                let old = running.as_tensor().to_vec1::<f32>()?;
                let new: Vec<f32> = old
                    .iter()
                    .zip(&batch)
                    .map(|(o, v)| (1.0 - m) * o + m * v * corr)
                    .collect();
                running.set(&Tensor::from_vec(new, old.len(), x.device())?)?;
                Ok(())
            };
            blend(&self.running_mean, mean.clone(), 1.0)?;
            blend(&self.running_var, var.clone(), unbiased)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().to_vec1::<f32>()?,
                self.running_var.as_tensor().to_vec1::<f32>()?,
            )
        };
        let op = BatchNormAct {
            mean,
            inv_std: var.iter().map(|v| 1.0 / (v + BN_EPS as f32).sqrt()).collect(),
            silu,
            batch_stats: train,
        };
        Ok(x.contiguous()?.apply_op3(&self.weight, &self.bias, op)?)
    }
}

struct ConvBnAct {
    weight: Tensor,
    kind: ConvKind,
    bn: BatchNorm2d,
    silu: bool,
}

impl ConvBnAct {
    fn new(
        ps: &mut ParamStore,
        prefix: &str,
        shape: [usize; 4],
        kind: ConvKind,
        silu: bool,
    ) -> Result<Self> {
        let weight = ps.get(&format!("{prefix}.0.weight"), &shape, Init::KaimingNormalFanOut)?;
        let bn = BatchNorm2d::new(ps, &format!("{prefix}.1"), shape[0])?;
        Ok(Self {
            weight,
            kind,
            bn,
            silu,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = match &self.kind {
            ConvKind::Stem { stride, padding } => x.conv2d(&self.weight, *padding, *stride, 1, 1)?,
            ConvKind::Pointwise => {
                let (b, c, h, w) = x.dims4()?;
                let o = self.weight.dim(0)?;
                let w2 = self.weight.reshape((o, c))?;
                w2.broadcast_matmul(&x.reshape((b, c, h * w))?)?
                    .reshape((b, o, h, w))?
            }
            ConvKind::Depthwise(geom) => depthwise_conv2d(x, &self.weight, *geom)?,
        };
        self.bn.forward_t(&y, self.silu, train)
    }
}

/// The squeeze-excitation gate inside each MBConv block (SiLU between the two
/// 1x1 projections, as in torchvision).
struct BlockSqueeze {
    fc1_w: Tensor,
    fc1_b: Tensor,
    fc2_w: Tensor,
    fc2_b: Tensor,
}

impl BlockSqueeze {
    fn new(ps: &mut ParamStore, prefix: &str, channels: usize, squeeze: usize) -> Result<Self> {
        let fc1_w = ps.get(
            &format!("{prefix}.fc1.weight"),
            &[squeeze, channels, 1, 1],
            Init::KaimingNormalFanOut,
        )?;
        let fc1_b = ps.get(&format!("{prefix}.fc1.bias"), &[squeeze], Init::Const(0.0))?;
        let fc2_w = ps.get(
            &format!("{prefix}.fc2.weight"),
            &[channels, squeeze, 1, 1],
            Init::KaimingNormalFanOut,
        )?;
        let fc2_b = ps.get(&format!("{prefix}.fc2.bias"), &[channels], Init::Const(0.0))?;
        Ok(Self {
            fc1_w: fc1_w.reshape((squeeze, channels))?,
            fc1_b,
            fc2_w: fc2_w.reshape((channels, squeeze))?,
            fc2_b,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.mean((2, 3))?;
        let s = s.matmul(&self.fc1_w.t()?)?.broadcast_add(&self.fc1_b)?.silu()?;
        let g = sigmoid(&s.matmul(&self.fc2_w.t()?)?.broadcast_add(&self.fc2_b)?)?;
        Ok(x.contiguous()?.apply_op2(&g.contiguous()?, ChannelScale)?)
    }
}

struct MbConv {
    expand: Option<ConvBnAct>,
    depthwise: ConvBnAct,
    squeeze: BlockSqueeze,
    project: ConvBnAct,
    residual: bool,
    drop_prob: f64,
}

impl MbConv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamStore,
        prefix: &str,
        expand_ratio: usize,
        kernel: usize,
        stride: usize,
        cin: usize,
        cout: usize,
        drop_prob: f64,
    ) -> Result<Self> {
        let exp = cin * expand_ratio;
        let mut idx = 0;
        let mut next = || {
            let p = format!("{prefix}.block.{idx}");
            idx += 1;
            p
        };
        let expand = if expand_ratio != 1 {
            Some(ConvBnAct::new(ps, &next(), [exp, cin, 1, 1], ConvKind::Pointwise, true)?)
        } else {
            None
        };
        let depthwise = ConvBnAct::new(
            ps,
            &next(),
            [exp, 1, kernel, kernel],
            ConvKind::Depthwise(DepthwiseGeometry::same(kernel, stride)),
            true,
        )?;
        let squeeze = BlockSqueeze::new(ps, &next(), exp, (cin / 4).max(1))?;
        let project = ConvBnAct::new(ps, &next(), [cout, exp, 1, 1], ConvKind::Pointwise, false)?;
        Ok(Self {
            expand,
            depthwise,
            squeeze,
            project,
            residual: stride == 1 && cin == cout,
            drop_prob,
        })
    }

    fn forward_t(&self, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let train = rng.is_some();
        let mut y = match &self.expand {
            Some(e) => e.forward_t(x, train)?,
            None => x.clone(),
        };
        y = self.depthwise.forward_t(&y, train)?;
        y = self.squeeze.forward(&y)?;
        y = self.project.forward_t(&y, train)?;
        if !self.residual {
            return Ok(y);
        }
        if let Some(rng) = rng {
            if self.drop_prob > 0.0 {
                // Row-wise stochastic depth: drop the whole residual branch per sample.
                let keep = 1.0 - self.drop_prob;
                let b = y.dim(0)?;
                let mask: Vec<f32> = (0..b)
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            (1.0 / keep) as f32
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let mask = Tensor::from_vec(mask, (b, 1, 1, 1), y.device())?;
                y = y.broadcast_mul(&mask)?;
            }
        }
        Ok((y + x)?)
    }
}

pub struct EfficientNetB0 {
    stem: ConvBnAct,
    blocks: Vec<MbConv>,
    top: ConvBnAct,
}

impl EfficientNetB0 {
    pub fn new(ps: &mut ParamStore) -> Result<Self> {
        let stem = ConvBnAct::new(
            ps,
            "features.0",
            [32, 3, 3, 3],
            ConvKind::Stem {
                stride: 2,
                padding: 1,
            },
            true,
        )?;
        let total: usize = STAGES.iter().map(|s| s.5).sum();
        let mut blocks = Vec::with_capacity(total);
        for (stage, &(e, k, s, cin, cout, n)) in STAGES.iter().enumerate() {
            for i in 0..n {
                let drop = STOCHASTIC_DEPTH * blocks.len() as f64 / total as f64;
                let (cin, stride) = if i == 0 { (cin, s) } else { (cout, 1) };
                blocks.push(MbConv::new(
                    ps,
                    &format!("features.{}.{i}", stage + 1),
                    e,
                    k,
                    stride,
                    cin,
                    cout,
                    drop,
                )?);
            }
        }
        let top = ConvBnAct::new(
            ps,
            "features.8",
            [FEATURE_CHANNELS, 320, 1, 1],
            ConvKind::Pointwise,
            true,
        )?;
        Ok(Self { stem, blocks, top })
    }

    /// `(B, 3, 224, 224)` → `(B, 1280, 7, 7)`. Passing an rng selects training
    /// mode (batch statistics, stochastic depth).
    pub fn features(&self, x: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let train = rng.is_some();
        let mut y = self.stem.forward_t(x, train)?;
        for block in &self.blocks {
            y = block.forward_t(&y, rng.as_deref_mut())?;
        }
        self.top.forward_t(&y, train)
    }

    /// Global average pooling over the spatial axes: `(B, 1280)`.
    pub fn pooled(&self, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        Ok(self.features(x, rng)?.mean((2, 3))?)
    }
}
