//! Waveform → normalised `224 × 224 × 3` log-mel image.
//!
//! The pipeline is resample → mel power spectrogram → log + per-image
//! standardisation → bilinear resize of the time axis → three identical
//! channels.

pub mod cache;
pub mod mel;
pub mod resample;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{read_tensor, write_tensor, TensorCache};
pub use mel::{mel_spectrogram, MelFilterbank};
pub use resample::resample;

use crate::audio::{read_wav, Waveform};
use crate::error::{Error, Result};
use crate::ingest::ClipRecord;

pub const IMAGE_SIZE: usize = 224;
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DspConfig {
    pub target_rate_hz: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub log_offset: f64,
    pub out_frames: usize,
    pub window: Window,
    pub spectrum_power: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            target_rate_hz: 11025,
            n_fft: 1024,
            hop: 256,
            n_mels: IMAGE_SIZE,
            f_min_hz: 0.0,
            f_max_hz: 4000.0,
            log_offset: 1e-6,
            out_frames: IMAGE_SIZE,
            window: Window::Hann,
            spectrum_power: 2.0,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("dsp: {m}")));
        if self.target_rate_hz == 0 {
            return fail("target_rate_hz must be positive");
        }
        if !(self.f_min_hz >= 0.0 && self.f_min_hz < self.f_max_hz) {
            return fail("need 0 <= f_min_hz < f_max_hz");
        }
        if self.f_max_hz > f64::from(self.target_rate_hz) / 2.0 {
            return fail("f_max_hz exceeds the Nyquist frequency");
        }
        if self.hop == 0 || self.hop > self.n_fft || self.n_fft < 2 {
            return fail("need 0 < hop <= n_fft");
        }
        if self.n_mels != IMAGE_SIZE || self.out_frames != IMAGE_SIZE {
            return fail("n_mels and out_frames must both be 224");
        }
        if !(self.log_offset > 0.0) || !(self.spectrum_power > 0.0) {
            return fail("log_offset and spectrum_power must be positive");
        }
        Ok(())
    }

    /// Short stable digest of every field; part of the cache key and of
    /// each prediction so tensors from different front ends never mix.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// `(log(m + offset) - mean) / std` over the whole image (population std).
/// A constant image maps to all zeros.
pub fn log_normalize(m: &Matrix, log_offset: f64) -> Matrix {
    let logs: Vec<f64> = m.data.iter().map(|&v| (f64::from(v) + log_offset).ln()).collect();
    let n = logs.len().max(1) as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    // Summation rounding can leave a tiny nonzero std for a constant image.
    let constant = logs.windows(2).all(|w| w[0] == w[1]);
    let data = if constant || std == 0.0 || !std.is_finite() {
        vec![0.0; logs.len()]
    } else {
        logs.iter().map(|v| ((v - mean) / std) as f32).collect()
    };
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data,
    }
}

/// A `224 (mel) × 224 (time) × 3` image stored in that index order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramTensor {
    pub data: Vec<f32>,
}

impl SpectrogramTensor {
    pub const SHAPE: [usize; 3] = [IMAGE_SIZE, IMAGE_SIZE, CHANNELS];
    pub const LEN: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;

    pub fn from_hwc(data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::LEN {
            return Err(Error::Shape(format!(
                "spectrogram tensor needs {} values, got {}",
                Self::LEN,
                data.len()
            )));
        }
        Ok(Self { data })
    }

    pub fn at(&self, mel: usize, frame: usize, channel: usize) -> f32 {
        self.data[(mel * IMAGE_SIZE + frame) * CHANNELS + channel]
    }

    /// One channel plane as `224 × 224`, row = mel bin.
    pub fn plane(&self, channel: usize) -> Vec<f32> {
        self.data.iter().skip(channel).step_by(CHANNELS).copied().collect()
    }

    /// Channel-first layout `(3, 224, 224)` as the network consumes it.
    pub fn to_chw(&self) -> Vec<f32> {
        (0..CHANNELS).flat_map(|c| self.plane(c)).collect()
    }
}

/// Bilinear resize of the time axis to `out_frames` (half-pixel centres, as
/// `align_corners = false`), then tiling to three channels.
pub fn to_model_tensor(m: &Matrix, out_frames: usize) -> Result<SpectrogramTensor> {
    if m.rows != IMAGE_SIZE || out_frames != IMAGE_SIZE {
        return Err(Error::Shape(format!(
            "expected {IMAGE_SIZE} mel rows and {IMAGE_SIZE} output frames, got {} rows",
            m.rows
        )));
    }
    if m.cols == 0 {
        return Err(Error::Shape("spectrogram has no frames".into()));
    }
    let scale = m.cols as f64 / out_frames as f64;
    let taps: Vec<(usize, usize, f32)> = (0..out_frames)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(m.cols - 1);
            let i1 = (i0 + 1).min(m.cols - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect();
    let mut data = Vec::with_capacity(SpectrogramTensor::LEN);
    for r in 0..m.rows {
        let row = &m.data[r * m.cols..(r + 1) * m.cols];
        for &(i0, i1, f) in &taps {
            let v = if f == 0.0 {
                row[i0]
            } else {
                row[i0] * (1.0 - f) + row[i1] * f
            };
            data.extend_from_slice(&[v; CHANNELS]);
        }
    }
    SpectrogramTensor::from_hwc(data)
}

/// Full front end for an in-memory waveform.
pub fn preprocess_waveform(w: &Waveform, cfg: &DspConfig) -> Result<SpectrogramTensor> {
    let w = resample(w, cfg.target_rate_hz)?;
    let mel = mel_spectrogram(&w, cfg)?;
    to_model_tensor(&log_normalize(&mel, cfg.log_offset), cfg.out_frames)
}

/// Front end for a corpus clip; errors carry the clip id.
pub fn preprocess_clip(record: &ClipRecord, cfg: &DspConfig) -> Result<SpectrogramTensor> {
    read_wav(&record.audio_path)
        .and_then(|w| preprocess_waveform(&w, cfg))
        .map_err(|e| e.with_clip(&record.clip_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_hash_is_stable() {
        let cfg = DspConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), DspConfig::default().hash());
        let other = DspConfig {
            hop: 128,
            ..DspConfig::default()
        };
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            DspConfig {
                f_max_hz: 6000.0,
                ..Default::default()
            },
            DspConfig {
                hop: 2048,
                ..Default::default()
            },
            DspConfig {
                n_mels: 128,
                ..Default::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn hand_computed_normalisation() {
        let e = std::f32::consts::E;
        let m = Matrix::new(2, 2, vec![0.0, 0.0, e - 1e-6, e - 1e-6]).unwrap();
        let out = log_normalize(&m, 1e-6);
        for (got, want) in out.data.iter().zip([-1.0, -1.0, 1.0, 1.0]) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn constant_image_normalises_to_zero() {
        let m = Matrix::new(3, 4, vec![2.5; 12]).unwrap();
        assert!(log_normalize(&m, 1e-6).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_identity_and_pair_duplication() {
        let base: Vec<f32> = (0..224 * 224).map(|i| (i as f32 * 0.37).sin()).collect();
        let m = Matrix::new(224, 224, base.clone()).unwrap();
        let t = to_model_tensor(&m, 224).unwrap();
        assert_eq!(t.plane(0), base);

        let doubled: Vec<f32> = base
            .chunks_exact(224)
            .flat_map(|row| row.iter().flat_map(|&v| [v, v]))
            .collect();
        let t2 = to_model_tensor(&Matrix::new(224, 448, doubled).unwrap(), 224).unwrap();
        assert_eq!(t2, t);
    }

    #[test]
    fn channels_are_identical() {
        let m = Matrix::new(224, 44, (0..224 * 44).map(|i| i as f32).collect()).unwrap();
        let t = to_model_tensor(&m, 224).unwrap();
        assert_eq!(t.plane(0), t.plane(1));
        assert_eq!(t.plane(1), t.plane(2));
        assert!(to_model_tensor(&Matrix::new(10, 4, vec![0.0; 40]).unwrap(), 224).is_err());
    }
}
