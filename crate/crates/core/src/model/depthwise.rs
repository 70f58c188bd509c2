//! Depthwise 2-D convolution as a single fused op.
//!
//! candle lowers grouped convolutions to one convolution per group, which is
//! unusable for the 672- and 1152-channel depthwise stages of EfficientNet.
//! This op computes all channel planes directly and provides its own
//! gradient kernels.

use candle_core::{CpuStorage, CustomOp2, Layout, Result, Shape, Tensor};
use rayon::prelude::*;

use super::simd::{axpy, dot_into, LANES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthwiseGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl DepthwiseGeometry {
    pub fn same(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            padding: (kernel - 1) / 2,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

/// `x: (B, C, H, W)`, `w: (C, 1, K, K)` → `(B, C, Ho, Wo)`.
pub fn depthwise_conv2d(x: &Tensor, w: &Tensor, geom: DepthwiseGeometry) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    let (wc, one, kh, kw) = w.dims4()?;
    if wc != c || one != 1 || kh != geom.kernel || kw != geom.kernel {
        candle_core::bail!(
            "depthwise kernel {:?} incompatible with input {:?} and kernel size {}",
            w.shape(),
            x.shape(),
            geom.kernel
        );
    }
    x.contiguous()?
        .apply_op2(&w.contiguous()?, DepthwiseForward { geom })
}

fn contiguous<'a>(s: &'a CpuStorage, l: &Layout, op: &str) -> Result<&'a [f32]> {
    let data = match s {
        CpuStorage::F32(v) => v.as_slice(),
        _ => candle_core::bail!("{op}: only f32 is supported"),
    };
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("{op}: input must be contiguous"),
    }
}

/// A zero-padded plane split into `stride x stride` phases, so that every
/// kernel tap reads a contiguous run: padded pixel `(oy * s + ky, ox * s + kx)`
/// lives in phase `(ky % s, kx % s)` at `(oy + ky / s, ox + kx / s)`.
///
/// Output rows are computed `cols` wide (the tail of each row is discarded),
/// which turns a whole plane into one long run per tap even for 7x7 maps.
#[derive(Default)]
struct PhasePlane {
    data: Vec<f32>,
    stride: usize,
    rows: usize,
    cols: usize,
}

impl PhasePlane {
    fn reset(&mut self, stride: usize, padded_rows: usize, padded_cols: usize) {
        self.stride = stride;
        self.rows = padded_rows.div_ceil(stride);
        self.cols = padded_cols.div_ceil(stride);
        self.data.clear();
        self.data.resize(stride * stride * self.rows * self.cols, 0.0);
    }

    /// Loads an `h x w` plane padded by `g.padding` on every side.
    fn load_padded(&mut self, g: DepthwiseGeometry, src: &[f32], h: usize, w: usize) {
        let s = g.stride;
        let p = g.padding;
        self.reset(s, h + 2 * p, w + 2 * p);
        for (iy, srow) in src.chunks_exact(w).enumerate() {
            let py = iy + p;
            for q in 0..s {
                // first input column whose padded column falls in phase q
                let ix0 = (q + s - p % s) % s;
                if ix0 >= w {
                    continue;
                }
                let col = ix0 + p;
                let phase = (py % s) * s + col % s;
                let at = (phase * self.rows + py / s) * self.cols + col / s;
                if s == 1 {
                    self.data[at..at + w].copy_from_slice(srow);
                } else {
                    let n = (w - ix0).div_ceil(s);
                    for (j, d) in self.data[at..at + n].iter_mut().enumerate() {
                        *d = srow[ix0 + j * s];
                    }
                }
            }
        }
    }

    /// Stride-1 plane holding `src` (`ho x wo`) dilated by `stride` and offset by `lead`.
    #[allow(clippy::too_many_arguments)]
    fn load_dilated(&mut self, src: &[f32], wo: usize, stride: usize, lead: usize, rows: usize, cols: usize) {
        self.reset(1, rows, cols);
        for (oy, srow) in src.chunks_exact(wo).enumerate() {
            let at = (lead + oy * stride) * cols + lead;
            for (d, &v) in self.data[at..].iter_mut().step_by(stride).zip(srow) {
                *d = v;
            }
        }
    }

    /// Start of every tap's run for output pixel (0, 0).
    fn tap_offsets(&self, k: usize) -> Vec<usize> {
        let s = self.stride;
        (0..k * k)
            .map(|t| {
                let (ky, kx) = (t / k, t % k);
                let phase = (ky % s) * s + kx % s;
                (phase * self.rows + ky / s) * self.cols + kx / s
            })
            .collect()
    }

    /// Length of a wide run covering `ho` output rows of width `wo`.
    fn wide_len(&self, ho: usize, wo: usize) -> usize {
        (ho - 1) * self.cols + wo
    }

    /// `dst[oy][ox] = sum_{ky,kx} ker[ky][kx] * plane[oy*s+ky][ox*s+kx]`.
    fn correlate(&self, ker: &[f32], k: usize, wo: usize, wide: &mut Vec<f32>, dst: &mut [f32]) {
        let ho = dst.len() / wo;
        let n = self.wide_len(ho, wo);
        let offsets = self.tap_offsets(k);
        wide.clear();
        wide.extend(self.data[offsets[0]..offsets[0] + n].iter().map(|v| v * ker[0]));
        for (&wv, &off) in ker.iter().zip(&offsets).skip(1) {
            axpy(wide, wv, &self.data[off..off + n]);
        }
        for (oy, drow) in dst.chunks_exact_mut(wo).enumerate() {
            drow.copy_from_slice(&wide[oy * self.cols..oy * self.cols + wo]);
        }
    }
}

/// Per-worker buffers reused across planes.
#[derive(Default)]
struct Scratch {
    plane: PhasePlane,
    wide: Vec<f32>,
}

struct DepthwiseForward {
    geom: DepthwiseGeometry,
}

impl CustomOp2 for DepthwiseForward {
    fn name(&self) -> &'static str {
        "depthwise-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let x = contiguous(s1, l1, self.name())?;
        let w = contiguous(s2, l2, self.name())?;
        let (b, c, h, wd) = l1.shape().dims4()?;
        let g = self.geom;
        let (ho, wo) = (g.out_len(h), g.out_len(wd));
        let k = g.kernel;
        let mut out = vec![0f32; b * c * ho * wo];
        out.par_chunks_mut(ho * wo)
            .enumerate()
            .for_each_init(Scratch::default, |sc, (plane, dst)| {
                let ker = &w[(plane % c) * k * k..(plane % c + 1) * k * k];
                sc.plane
                    .load_padded(g, &x[plane * h * wd..(plane + 1) * h * wd], h, wd);
                sc.plane.correlate(ker, k, wo, &mut sc.wide, dst);
            });
        Ok((CpuStorage::F32(out), Shape::from((b, c, ho, wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, _, h, wd) = x.dims4()?;
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(
            w,
            &DepthwiseGradInput {
                geom: self.geom,
                in_h: h,
                in_w: wd,
            },
        )?;
        let gw = x.apply_op2_no_bwd(&grad, &DepthwiseGradKernel { geom: self.geom })?;
        Ok((Some(gx), Some(gw)))
    }
}

/// Input gradient as a stride-1 correlation of the dilated output gradient
/// with the flipped kernel.
struct DepthwiseGradInput {
    geom: DepthwiseGeometry,
    in_h: usize,
    in_w: usize,
}

impl CustomOp2 for DepthwiseGradInput {
    fn name(&self) -> &'static str {
        "depthwise-conv2d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let gy = contiguous(s1, l1, self.name())?;
        let w = contiguous(s2, l2, self.name())?;
        let (b, c, ho, wo) = l1.shape().dims4()?;
        let (h, wd) = (self.in_h, self.in_w);
        let g = self.geom;
        let k = g.kernel;
        let lead = k - 1 - g.padding;
        let flipped: Vec<f32> = w
            .chunks_exact(k * k)
            .flat_map(|ker| ker.iter().rev().copied())
            .collect();
        let mut out = vec![0f32; b * c * h * wd];
        out.par_chunks_mut(h * wd)
            .enumerate()
            .for_each_init(Scratch::default, |sc, (plane, dst)| {
                let ker = &flipped[(plane % c) * k * k..(plane % c + 1) * k * k];
                sc.plane.load_dilated(
                    &gy[plane * ho * wo..(plane + 1) * ho * wo],
                    wo,
                    g.stride,
                    lead,
                    h + k - 1,
                    wd + k - 1,
                );
                sc.plane.correlate(ker, k, wd, &mut sc.wide, dst);
            });
        Ok((CpuStorage::F32(out), Shape::from((b, c, h, wd))))
    }
}

struct DepthwiseGradKernel {
    geom: DepthwiseGeometry,
}

impl CustomOp2 for DepthwiseGradKernel {
    fn name(&self) -> &'static str {
        "depthwise-conv2d-grad-kernel"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let x = contiguous(s1, l1, self.name())?;
        let gy = contiguous(s2, l2, self.name())?;
        let (b, c, h, wd) = l1.shape().dims4()?;
        let (_, _, ho, wo) = l2.shape().dims4()?;
        let g = self.geom;
        let k = g.kernel;
        let mut out = vec![0f32; c * k * k];
        out.par_chunks_mut(k * k)
            .enumerate()
            .for_each_init(Scratch::default, |sc, (ch, dst)| {
                let mut lanes = vec![[0f32; LANES]; k * k];
                for n in 0..b {
                    let plane = n * c + ch;
                    sc.plane
                        .load_padded(g, &x[plane * h * wd..(plane + 1) * h * wd], h, wd);
                    // The output gradient laid out on the wide grid, zero in the
                    // discarded columns.
                    let cols = sc.plane.cols;
                    let len = sc.plane.wide_len(ho, wo);
                    sc.wide.clear();
                    sc.wide.resize(len, 0.0);
                    for (oy, grow) in gy[plane * ho * wo..(plane + 1) * ho * wo]
                        .chunks_exact(wo)
                        .enumerate()
                    {
                        sc.wide[oy * cols..oy * cols + wo].copy_from_slice(grow);
                    }
                    let offsets = sc.plane.tap_offsets(k);
                    for (lane, &off) in lanes.iter_mut().zip(&offsets) {
                        dot_into(lane, &sc.wide, &sc.plane.data[off..off + len]);
                    }
                }
                for (d, l) in dst.iter_mut().zip(&lanes) {
                    *d = l.iter().sum();
                }
            });
        Ok((CpuStorage::F32(out), Shape::from((c, 1, k, k))))
    }
}
