//! Positive-weighted binary cross-entropy on logits.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

use crate::error::{Error, Result};
use crate::rules::N_RULES;

/// Reciprocal of each per-rule loss weight, used as the positive-class weight.
pub fn compute_pos_weights(loss_weights: &[f64; N_RULES]) -> Result<[f64; N_RULES]> {
    if loss_weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::Config(format!(
            "loss weights must be positive and finite, got {loss_weights:?}"
        )));
    }
    Ok(loss_weights.map(|w| 1.0 / w))
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-element loss `-[pw*y*log s(z) + (1-y)*log(1-s(z))]` in the overflow-free
/// form `(1-y)*z + (pw*y + 1 - y) * softplus(-z)`.
pub fn bce_term(z: f64, y: f64, pw: f64) -> f64 {
    (1.0 - y) * z + (pw * y + 1.0 - y) * softplus(-z)
}

/// d(bce_term)/dz.
fn bce_grad(z: f64, y: f64, pw: f64) -> f64 {
    (1.0 - y) * sigmoid(z) - pw * y * sigmoid(-z)
}

struct WeightedBce {
    pos_weights: [f64; N_RULES],
}

fn values(s: &CpuStorage, l: &Layout) -> Result<Vec<f64>, candle_core::Error> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("bce: inputs must be contiguous".into()))?;
    Ok(match s {
        CpuStorage::F32(v) => v[a..b].iter().map(|&x| f64::from(x)).collect(),
        CpuStorage::F64(v) => v[a..b].to_vec(),
        _ => candle_core::bail!("bce: only f32 and f64 are supported"),
    })
}

impl CustomOp2 for WeightedBce {
    fn name(&self) -> &'static str {
        "weighted-bce-logits"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let z = values(s1, l1)?;
        let y = values(s2, l2)?;
        let sum: f64 = z
            .iter()
            .zip(&y)
            .enumerate()
            .map(|(i, (&z, &y))| bce_term(z, y, self.pos_weights[i % N_RULES]))
            .sum();
        let mean = sum / z.len() as f64;
        let out = match s1 {
            CpuStorage::F64(_) => CpuStorage::F64(vec![mean]),
            _ => CpuStorage::F32(vec![mean as f32]),
        };
        Ok((out, Shape::from(())))
    }

    fn bwd(
        &self,
        logits: &Tensor,
        targets: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let dtype = logits.dtype();
        let z = logits.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let y = targets.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let n = z.len() as f64;
        let g: Vec<f64> = z
            .iter()
            .zip(&y)
            .enumerate()
            .map(|(i, (&z, &y))| bce_grad(z, y, self.pos_weights[i % N_RULES]) / n)
            .collect();
        let g = Tensor::from_vec(g, logits.shape(), logits.device())?
            .to_dtype(dtype)?
            .broadcast_mul(grad)?;
        Ok((Some(g), None))
    }
}

/// Mean weighted BCE over all `B × 3` elements. Differentiable in `logits`.
pub fn weighted_bce_logits(
    logits: &Tensor,
    targets: &Tensor,
    pos_weights: &[f64; N_RULES],
) -> Result<Tensor> {
    let (b, k) = logits.dims2().map_err(|_| {
        Error::Shape(format!("logits must be (B, {N_RULES}), got {:?}", logits.dims()))
    })?;
    if k != N_RULES || targets.dims() != [b, k] {
        return Err(Error::Shape(format!(
            "logits {:?} and targets {:?} must both be (B, {N_RULES})",
            logits.dims(),
            targets.dims()
        )));
    }
    let targets = targets.to_dtype(logits.dtype())?.contiguous()?;
    Ok(logits.contiguous()?.apply_op2(
        &targets,
        WeightedBce {
            pos_weights: *pos_weights,
        },
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn reciprocal_examples() {
        let pw = compute_pos_weights(&[1.0, 0.19, 0.95]).unwrap();
        for (g, w) in pw.iter().zip([1.0, 5.263158, 1.052632]) {
            assert!((g - w).abs() < 1e-6);
        }
        assert_eq!(compute_pos_weights(&[1.0, 1.0, 1.0]).unwrap(), [1.0; 3]);
        assert_eq!(compute_pos_weights(&[0.5, 2.0, 4.0]).unwrap(), [2.0, 0.5, 0.25]);
        assert!(compute_pos_weights(&[1.0, 0.0, 1.0]).is_err());
        assert!(compute_pos_weights(&[1.0, -2.0, 1.0]).is_err());
    }

    #[test]
    fn zero_logits_give_ln2() {
        let dev = Device::Cpu;
        let z = Tensor::zeros((1, 3), candle_core::DType::F64, &dev).unwrap();
        let y = Tensor::new(&[[1f64, 0., 1.]], &dev).unwrap();
        let l = weighted_bce_logits(&z, &y, &[1.0; 3]).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        assert!(bce_term(100.0, 0.0, 5.0).is_finite());
        assert!((bce_term(-100.0, 1.0, 1.0) - 100.0).abs() < 1e-9);
        assert!(bce_term(100.0, 1.0, 1.0) >= 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let z0 = [[0.3f64, -1.2, 2.0], [0.0, 4.0, -0.7]];
        let y = Tensor::new(&[[1f64, 0., 1.], [0., 1., 1.]], &dev).unwrap();
        let pw = [1.0, 5.263158, 1.052632];
        let z = Var::new(&z0, &dev).unwrap();
        let loss = weighted_bce_logits(z.as_tensor(), &y, &pw).unwrap();
        let g = loss.backward().unwrap().get(z.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
        let eps = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let f = |d: f64| {
                    let mut zz = z0;
                    zz[i][j] += d;
                    weighted_bce_logits(&Tensor::new(&zz, &dev).unwrap(), &y, &pw)
                        .unwrap()
                        .to_scalar::<f64>()
                        .unwrap()
                };
                let num = (f(eps) - f(-eps)) / (2.0 * eps);
                assert!((num - g[i][j]).abs() < 1e-7, "{i},{j}: {num} vs {}", g[i][j]);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let dev = Device::Cpu;
        let z = Tensor::zeros((2, 3), candle_core::DType::F32, &dev).unwrap();
        let y = Tensor::zeros((3, 3), candle_core::DType::F32, &dev).unwrap();
        assert!(weighted_bce_logits(&z, &y, &[1.0; 3]).is_err());
        let z4 = Tensor::zeros((2, 4), candle_core::DType::F32, &dev).unwrap();
        assert!(weighted_bce_logits(&z4, &z4, &[1.0; 3]).is_err());
    }
}
