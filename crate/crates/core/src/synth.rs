//! Synthetic tone corpora in the on-disk corpus layout, for smoke tests and
//! demos when the recitation dataset is not at hand.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{encode_wav_i16, Waveform};
use crate::error::{Error, Result};
use crate::ingest::{audio_path, labels_path, speaker_id, write_labels, ClipRecord, RuleLabels};

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub clips_per_speaker: usize,
    pub sample_rate_hz: u32,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_clips: 32,
            clips_per_speaker: 4,
            sample_rate_hz: 11025,
            min_duration_s: 1.0,
            max_duration_s: 2.0,
            seed: 0,
        }
    }
}

/// Clip `i`: a harmonic tone whose fundamental, amplitude-modulation rate and
/// pitch glide all depend on `i`. Global pooling in the classifier discards
/// where a pattern sits in the image, so clips differ in texture (harmonic
/// spacing, temporal rhythm, slope) rather than only in position.
pub fn tone_clip(i: usize, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Waveform {
    let sr = f64::from(spec.sample_rate_hz);
    let dur = rng.random_range(spec.min_duration_s..=spec.max_duration_s);
    let n = (dur * sr) as usize;
    let f0 = 110.0 + 23.0 * (i % 41) as f64;
    let am = 1.5 + 0.9 * (i % 7) as f64;
    let glide: f64 = [-0.25, 0.0, 0.25][i % 3];
    let phase = rng.random_range(0.0..TAU);
    let n_harm = ((3800.0 / (f0 * (1.0 + glide.max(0.0)))) as usize).clamp(1, 12);
    let mut acc = vec![0f64; n_harm];
    let samples = (0..n)
        .map(|k| {
            let t = k as f64 / sr;
            let f = f0 * (1.0 + glide * t / dur);
            let env = 0.55 + 0.45 * (TAU * am * t + phase).sin();
            let mut s = 0.0;
            for (h, a) in acc.iter_mut().enumerate() {
                let order = (h + 1) as f64;
                *a += TAU * f * order / sr;
                s += a.sin() / order;
            }
            (0.25 * s * env + rng.random_range(-0.01..0.01)) as f32
        })
        .collect();
    Waveform {
        samples,
        sample_rate_hz: spec.sample_rate_hz,
    }
}

/// Writes `audio/<id>.wav` and `labels.csv` under `root` with uniformly random
/// labels and returns the records.
pub fn write_corpus(root: &Path, spec: &SynthSpec) -> Result<Vec<ClipRecord>> {
    if spec.n_clips == 0 || spec.clips_per_speaker == 0 {
        return Err(Error::Invalid("synthetic corpus needs at least one clip".into()));
    }
    let audio_dir = root.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.n_clips);
    for i in 0..spec.n_clips {
        let clip_id = format!("S{}_{}", i / spec.clips_per_speaker + 1, i % spec.clips_per_speaker + 1);
        let labels = RuleLabels::from_array([0; 3].map(|_: u8| rng.random_range(0..2u8)))?;
        let wav = tone_clip(i, spec, &mut rng);
        let path = audio_path(root, &clip_id);
        std::fs::write(&path, encode_wav_i16(&wav)?).map_err(|e| Error::io(&path, e))?;
        records.push(ClipRecord {
            speaker_id: speaker_id(&clip_id).to_string(),
            clip_id,
            audio_path: path,
            labels,
            imputed: false,
        });
    }
    write_labels(&records, &labels_path(root))?;
    Ok(records)
}
