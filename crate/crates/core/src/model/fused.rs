//! Fused CPU kernels for the element-wise hot spots of the backbone.
//!
//! Composing batch norm, SiLU and broadcast scaling out of primitive tensor
//! ops keeps several full-resolution intermediates alive for the backward
//! pass; these ops recompute what they need from their inputs instead.

use candle_core::{CpuStorage, CustomOp2, CustomOp3, Layout, Result, Shape, Storage, Tensor};
use rayon::prelude::*;

use super::simd::{dispatch, dot_into, LANES};

/// Runs `f` on the contiguous f32 contents of `t`.
pub(crate) fn with_f32<R>(t: &Tensor, f: impl FnOnce(&[f32]) -> R) -> Result<R> {
    let t = t.contiguous()?;
    let (storage, layout) = t.storage_and_layout();
    match &*storage {
        Storage::Cpu(CpuStorage::F32(v)) => {
            let (a, b) = layout
                .contiguous_offsets()
                .ok_or_else(|| candle_core::Error::Msg("expected contiguous tensor".into()))?;
            Ok(f(&v[a..b]))
        }
        _ => candle_core::bail!("fused kernels need an f32 cpu tensor"),
    }
}

fn slice<'a>(s: &'a CpuStorage, l: &Layout, op: &str) -> Result<&'a [f32]> {
    let v = match s {
        CpuStorage::F32(v) => v.as_slice(),
        _ => candle_core::bail!("{op}: only f32 is supported"),
    };
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("{op}: input must be contiguous"),
    }
}

/// Branch-free `exp` for f32 (Cody-Waite reduction plus a degree-6
/// polynomial), within a few ulp of `f32::exp` and vectorisable.
#[inline]
pub(crate) fn exp_f32(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.0, 88.0);
    let t = x * std::f32::consts::LOG2_E + ROUND;
    let n = t - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
        + 1.666_666_5e-1)
        * r
        + 0.5;
    let y = p * r * r + r + 1.0;
    // The low mantissa bits of `t` hold `n` exactly; integer arithmetic on
    // them avoids a saturating float-to-int conversion, which does not vectorise.
    let k = t.to_bits().wrapping_sub(ROUND.to_bits());
    y * f32::from_bits(k.wrapping_add(127) << 23)
}

#[inline]
fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + exp_f32(-z))
}

dispatch! {
    /// Lane-wise sums of `x` and `x^2`.
    fn plane_moments(x: &[f32]) -> (f32, f32) {
        let mut s = [0f32; LANES];
        let mut q = [0f32; LANES];
        let mut chunks = x.chunks_exact(LANES);
        for c in &mut chunks {
            for i in 0..LANES {
                s[i] += c[i];
                q[i] += c[i] * c[i];
            }
        }
        for (i, &v) in chunks.remainder().iter().enumerate() {
            s[i] += v;
            q[i] += v * v;
        }
        (s.iter().sum(), q.iter().sum())
    }
}

dispatch! {
    /// `dst = act(src * scale + shift)`.
    fn affine_act(src: &[f32], dst: &mut [f32], scale: f32, shift: f32, silu: bool) {
        if silu {
            for (d, &v) in dst.iter_mut().zip(src) {
                let z = v * scale + shift;
                *d = z * sigmoid(z);
            }
        } else {
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * scale + shift;
            }
        }
    }
}

dispatch! {
    /// `dst = dy * act'(z)` with `z = gamma * xhat + beta`; returns the sums of
    /// `dst` and `dst * xhat`.
    fn bn_grad_pre(
        src: &[f32],
        dy: &[f32],
        dst: &mut [f32],
        mean: f32,
        inv: f32,
        gamma: f32,
        beta: f32,
        silu: bool,
    ) -> (f32, f32) {
        let mut s_dz = [0f32; LANES];
        let mut s_dzx = [0f32; LANES];
        let mut d_chunks = dst.chunks_exact_mut(LANES);
        let mut x_chunks = src.chunks_exact(LANES);
        let mut g_chunks = dy.chunks_exact(LANES);
        let step = |v: f32, gv: f32| -> (f32, f32) {
            let xhat = (v - mean) * inv;
            let dz = if silu {
                let z = xhat * gamma + beta;
                let sg = sigmoid(z);
                gv * sg * (1.0 + z * (1.0 - sg))
            } else {
                gv
            };
            (dz, xhat)
        };
        for ((d, x), g) in (&mut d_chunks).zip(&mut x_chunks).zip(&mut g_chunks) {
            for i in 0..LANES {
                let (dz, xhat) = step(x[i], g[i]);
                d[i] = dz;
                s_dz[i] += dz;
                s_dzx[i] += dz * xhat;
            }
        }
        let tail = d_chunks
            .into_remainder()
            .iter_mut()
            .zip(x_chunks.remainder())
            .zip(g_chunks.remainder());
        for (i, ((d, &x), &g)) in tail.enumerate() {
            let (dz, xhat) = step(x, g);
            *d = dz;
            s_dz[i] += dz;
            s_dzx[i] += dz * xhat;
        }
        (s_dz.iter().sum(), s_dzx.iter().sum())
    }
}

dispatch! {
    /// In place: `dz -> k * (dz - mean_dz - xhat * mean_dzx)`.
    fn bn_grad_post(src: &[f32], dst: &mut [f32], mean: f32, inv: f32, k: f32, mean_dz: f32, mean_dzx: f32) {
        for (d, &v) in dst.iter_mut().zip(src) {
            let xhat = (v - mean) * inv;
            *d = k * (*d - mean_dz - xhat * mean_dzx);
        }
    }
}

dispatch! {
    /// `dst = dy * s`, returning `sum(dy * x)`.
    fn scale_grad(dy: &[f32], x: &[f32], dst: &mut [f32], s: f32) -> f32 {
        for (d, &g) in dst.iter_mut().zip(dy) {
            *d = g * s;
        }
        let mut acc = [0f32; LANES];
        dot_into(&mut acc, dy, x);
        acc.iter().sum()
    }
}

dispatch! {
    fn scale_into(src: &[f32], dst: &mut [f32], s: f32) {
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = v * s;
        }
    }
}

/// Per-channel mean and biased variance of an NCHW tensor.
pub(crate) fn channel_moments(x: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    with_f32(x, |data| {
        (0..c)
            .into_par_iter()
            .map(|ch| {
                let mut sum = 0f64;
                let mut sq = 0f64;
                for n in 0..b {
                    let (s, q) = plane_moments(&data[(n * c + ch) * hw..(n * c + ch + 1) * hw]);
                    sum += s as f64;
                    sq += q as f64;
                }
                let n = (b * hw) as f64;
                let mean = sum / n;
                ((mean) as f32, (sq / n - mean * mean).max(0.0) as f32)
            })
            .unzip()
    })
}

/// `y = act(gamma * (x - mean) * inv_std + beta)` over NCHW input, with
/// `act` either identity or SiLU. When `batch_stats` is set, `mean` and
/// `inv_std` are treated as functions of `x` in the backward pass.
pub(crate) struct BatchNormAct {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub silu: bool,
    pub batch_stats: bool,
}

impl BatchNormAct {
    fn plane_params<'a>(&'a self, gamma: &'a [f32], beta: &'a [f32], ch: usize) -> (f32, f32, f32, f32) {
        (self.mean[ch], self.inv_std[ch], gamma[ch], beta[ch])
    }
}

impl CustomOp3 for BatchNormAct {
    fn name(&self) -> &'static str {
        "batch-norm-act"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let x = slice(s1, l1, self.name())?;
        let gamma = slice(s2, l2, self.name())?;
        let beta = slice(s3, l3, self.name())?;
        let (_, c, h, w) = l1.shape().dims4()?;
        let hw = h * w;
        let mut out = vec![0f32; x.len()];
        out.par_chunks_mut(hw).enumerate().for_each(|(plane, dst)| {
            let (mean, inv, g, b) = self.plane_params(gamma, beta, plane % c);
            let scale = g * inv;
            let shift = b - mean * scale;
            affine_act(&x[plane * hw..(plane + 1) * hw], dst, scale, shift, self.silu);
        });
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let hw = h * w;
        let gamma_v = gamma.to_vec1::<f32>()?;
        let beta_v = beta.to_vec1::<f32>()?;
        let grad = grad.contiguous()?;
        let (dx, dgamma, dbeta) = with_f32(x, |xs| {
            with_f32(&grad, |dy| {
                // Pass 1: dz = dy * act'(z) per plane, with the plane sums of dz and dz * xhat.
                let mut dx = vec![0f32; xs.len()];
                let plane_sums: Vec<(f32, f32)> = dx
                    .par_chunks_mut(hw)
                    .enumerate()
                    .map(|(plane, dst)| {
                        let (mean, inv, g, bt) = self.plane_params(&gamma_v, &beta_v, plane % c);
                        let src = &xs[plane * hw..(plane + 1) * hw];
                        let gy = &dy[plane * hw..(plane + 1) * hw];
                        bn_grad_pre(src, gy, dst, mean, inv, g, bt, self.silu)
                    })
                    .collect();
                let mut sums = vec![(0f64, 0f64); c];
                for (plane, (a, q)) in plane_sums.iter().enumerate() {
                    sums[plane % c].0 += *a as f64;
                    sums[plane % c].1 += *q as f64;
                }
                // Pass 2: dz -> dx in place.
                let count = (b * hw) as f32;
                dx.par_chunks_mut(hw).enumerate().for_each(|(plane, dst)| {
                    let ch = plane % c;
                    let (mean, inv, g, _) = self.plane_params(&gamma_v, &beta_v, ch);
                    let k = g * inv;
                    if self.batch_stats {
                        let mean_dz = sums[ch].0 as f32 / count;
                        let mean_dzx = sums[ch].1 as f32 / count;
                        let src = &xs[plane * hw..(plane + 1) * hw];
                        bn_grad_post(src, dst, mean, inv, k, mean_dz, mean_dzx);
                    } else {
                        for d in dst.iter_mut() {
                            *d *= k;
                        }
                    }
                });
                let dgamma: Vec<f32> = sums.iter().map(|s| s.1 as f32).collect();
                let dbeta: Vec<f32> = sums.iter().map(|s| s.0 as f32).collect();
                (dx, dgamma, dbeta)
            })
        })??;
        let dev = x.device();
        Ok((
            Some(Tensor::from_vec(dx, (b, c, h, w), dev)?),
            Some(Tensor::from_vec(dgamma, c, dev)?),
            Some(Tensor::from_vec(dbeta, c, dev)?),
        ))
    }
}

/// `y[b, c, :, :] = x[b, c, :, :] * g[b, c]`.
pub(crate) struct ChannelScale;

impl CustomOp2 for ChannelScale {
    fn name(&self) -> &'static str {
        "channel-scale"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let x = slice(s1, l1, self.name())?;
        let g = slice(s2, l2, self.name())?;
        let (b, c, h, w) = l1.shape().dims4()?;
        if g.len() != b * c {
            candle_core::bail!("channel-scale: gate has {} entries, expected {}", g.len(), b * c);
        }
        let hw = h * w;
        let mut out = vec![0f32; x.len()];
        out.par_chunks_mut(hw).enumerate().for_each(|(plane, dst)| {
            scale_into(&x[plane * hw..(plane + 1) * hw], dst, g[plane]);
        });
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        g: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let hw = h * w;
        let gate = g.flatten_all()?.to_vec1::<f32>()?;
        let grad = grad.contiguous()?;
        let (dx, dg) = with_f32(x, |xs| {
            with_f32(&grad, |dy| {
                let mut dx = vec![0f32; xs.len()];
                let dg: Vec<f32> = dx
                    .par_chunks_mut(hw)
                    .enumerate()
                    .map(|(plane, dst)| {
                        let src = &xs[plane * hw..(plane + 1) * hw];
                        let gy = &dy[plane * hw..(plane + 1) * hw];
                        scale_grad(gy, src, dst, gate[plane])
                    })
                    .collect();
                (dx, dg)
            })
        })??;
        let dev = x.device();
        Ok((
            Some(Tensor::from_vec(dx, (b, c, h, w), dev)?),
            Some(Tensor::from_vec(dg, g.shape(), dev)?),
        ))
    }
}
