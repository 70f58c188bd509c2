//! Short-time power spectrum and Slaney mel filterbank.

use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};

use super::{DspConfig, Matrix};
use crate::audio::Waveform;
use crate::error::{Error, Result};

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MIN_LOG_MEL {
        mel * F_SP
    } else {
        MIN_LOG_HZ * ((mel - MIN_LOG_MEL) * log_step()).exp()
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Triangular filters on the mel scale with area normalisation.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels + 2` edge frequencies; filter `m` spans `edges[m]..edges[m + 2]`
    /// and peaks at `edges[m + 1]`.
    pub edges_hz: Vec<f64>,
    /// `n_mels × (n_fft / 2 + 1)` weights, row-major.
    pub weights: Vec<f64>,
    pub n_freqs: usize,
}

impl MelFilterbank {
    pub fn new(cfg: &DspConfig) -> Self {
        let n_freqs = cfg.n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.f_min_hz), hz_to_mel(cfg.f_max_hz));
        let n_edges = cfg.n_mels + 2;
        let edges_hz: Vec<f64> = (0..n_edges)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_edges - 1) as f64))
            .collect();
        let bin_hz = f64::from(cfg.target_rate_hz) / cfg.n_fft as f64;
        let mut weights = vec![0f64; cfg.n_mels * n_freqs];
        for m in 0..cfg.n_mels {
            let (l, c, r) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            let norm = 2.0 / (r - l);
            for k in 0..n_freqs {
                let f = k as f64 * bin_hz;
                let rise = (f - l) / (c - l);
                let fall = (r - f) / (r - c);
                weights[m * n_freqs + k] = rise.min(fall).max(0.0) * norm;
            }
        }
        Self {
            edges_hz,
            weights,
            n_freqs,
        }
    }

    pub fn n_mels(&self) -> usize {
        self.edges_hz.len() - 2
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..self.edges_hz.len() - 1]
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_freqs..(m + 1) * self.n_freqs]
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    (if r < n as isize { r } else { period - r }) as usize
}

/// Power spectrogram with centred, reflect-padded frames:
/// `(n_fft / 2 + 1) × (len / hop + 1)`, row-major by frequency.
pub fn stft_power(samples: &[f32], cfg: &DspConfig) -> Result<(Vec<f64>, usize)> {
    if samples.len() < cfg.hop {
        return Err(Error::Invalid(format!(
            "waveform of {} samples is shorter than one hop ({})",
            samples.len(),
            cfg.hop
        )));
    }
    let n_fft = cfg.n_fft;
    let n_freqs = n_fft / 2 + 1;
    let frames = samples.len() / cfg.hop + 1;
    let window = hann(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let half = (n_fft / 2) as isize;
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut power = vec![0f64; n_freqs * frames];
    for t in 0..frames {
        let start = (t * cfg.hop) as isize - half;
        for (j, b) in buf.iter_mut().enumerate() {
            let s = samples[reflect(start + j as isize, samples.len())];
            *b = Complex::new(f64::from(s) * window[j], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..n_freqs {
            power[k * frames + t] = buf[k].norm_sqr().powf(cfg.spectrum_power / 2.0);
        }
    }
    Ok((power, frames))
}

/// `n_mels × T` mel power spectrogram of a waveform already at the target rate.
pub fn mel_spectrogram(w: &Waveform, cfg: &DspConfig) -> Result<Matrix> {
    if w.sample_rate_hz != cfg.target_rate_hz {
        return Err(Error::Invalid(format!(
            "expected {} Hz audio, got {} Hz",
            cfg.target_rate_hz, w.sample_rate_hz
        )));
    }
    let (power, frames) = stft_power(&w.samples, cfg)?;
    let fb = MelFilterbank::new(cfg);
    let mut out = vec![0f32; cfg.n_mels * frames];
    for m in 0..cfg.n_mels {
        let row = fb.row(m);
        let dst = &mut out[m * frames..(m + 1) * frames];
        for (k, &wt) in row.iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            let src = &power[k * frames..(k + 1) * frames];
            for (d, &p) in dst.iter_mut().zip(src) {
                *d += (wt * p) as f32;
            }
        }
    }
    Matrix::new(cfg.n_mels, frames, out)
}
