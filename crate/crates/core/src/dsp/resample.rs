//! Band-limited resampling with a Hann-windowed sinc kernel (width 6 zero
//! crossings, roll-off 0.99), the same construction torchaudio uses by default.

use std::f64::consts::PI;

use crate::audio::Waveform;
use crate::error::{Error, Result};

const LOWPASS_WIDTH: f64 = 6.0;
const ROLLOFF: f64 = 0.99;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// One kernel row per output phase, each `2 * width + orig` taps long.
fn kernels(orig: usize, new: usize) -> (Vec<f64>, usize) {
    let base = orig.min(new) as f64 * ROLLOFF;
    let width = (LOWPASS_WIDTH * orig as f64 / base).ceil() as usize;
    let taps = 2 * width + orig;
    let scale = base / orig as f64;
    let mut k = Vec::with_capacity(new * taps);
    for phase in 0..new {
        for j in 0..taps {
            let idx = (j as f64 - width as f64) / orig as f64;
            let t = ((-(phase as f64) / new as f64 + idx) * base).clamp(-LOWPASS_WIDTH, LOWPASS_WIDTH);
            let window = (t * PI / LOWPASS_WIDTH / 2.0).cos().powi(2);
            let t = t * PI;
            let sinc = if t == 0.0 { 1.0 } else { t.sin() / t };
            k.push(sinc * window * scale);
        }
    }
    (k, width)
}

pub fn resample(w: &Waveform, target_rate_hz: u32) -> Result<Waveform> {
    if w.samples.is_empty() {
        return Err(Error::Invalid("cannot resample an empty waveform".into()));
    }
    if target_rate_hz == 0 {
        return Err(Error::Invalid("target sample rate must be positive".into()));
    }
    if w.sample_rate_hz == target_rate_hz {
        return Ok(w.clone());
    }
    let g = gcd(u64::from(w.sample_rate_hz), u64::from(target_rate_hz));
    let orig = (u64::from(w.sample_rate_hz) / g) as usize;
    let new = (u64::from(target_rate_hz) / g) as usize;
    let (kern, width) = kernels(orig, new);
    let taps = 2 * width + orig;

    let n = w.samples.len();
    let mut padded = vec![0f64; width + n + width + orig];
    for (p, &s) in padded[width..].iter_mut().zip(&w.samples) {
        *p = f64::from(s);
    }
    let frames = n / orig + 1;
    let out_len = (new * n).div_ceil(orig);
    let mut out = Vec::with_capacity(out_len);
    'outer: for f in 0..frames {
        let seg = &padded[f * orig..f * orig + taps];
        for row in kern.chunks_exact(taps) {
            if out.len() == out_len {
                break 'outer;
            }
            let acc: f64 = row.iter().zip(seg).map(|(a, b)| a * b).sum();
            out.push(acc as f32);
        }
    }
    Waveform::new(out, target_rate_hz)
}
