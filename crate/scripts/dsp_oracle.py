"""Reference front end used to freeze the DSP golden tensors.

Independent of the Rust code: resampling is torch conv1d with torchaudio's
default sinc_interp_hann kernel, the STFT is torch.stft, the mel filterbank
follows librosa's Slaney construction, and the time resize is
torch.nn.functional.interpolate(mode="bilinear", align_corners=False).

Usage: python3 scripts/dsp_oracle.py crates/core/tests/fixtures/dsp
Writes the fixture WAVs and `<name>.mst` golden tensors (header "224 224 3\n",
then little-endian f32 in mel, time, channel order).
"""

import math
import sys
import wave
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

SR = 11025
N_FFT = 1024
HOP = 256
N_MELS = 224
F_MIN = 0.0
F_MAX = 4000.0
LOG_OFFSET = 1e-6
OUT = 224


def write_wav(path, samples, rate):
    pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(pcm.tobytes())


def read_wav(path):
    with wave.open(str(path), "rb") as w:
        assert w.getnchannels() == 1 and w.getsampwidth() == 2
        rate = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return (pcm.astype(np.float64) / 32768.0).astype(np.float32), rate


def resample(x, orig, new, width=6, rolloff=0.99):
    if orig == new:
        return x
    g = math.gcd(orig, new)
    orig, new = orig // g, new // g
    base = min(orig, new) * rolloff
    w = math.ceil(width * orig / base)
    idx = torch.arange(-w, w + orig, dtype=torch.float64)[None, None] / orig
    t = torch.arange(0, -new, -1, dtype=torch.float64)[:, None, None] / new + idx
    t = (t * base).clamp(-width, width)
    window = torch.cos(t * math.pi / width / 2) ** 2
    t = t * math.pi
    kern = torch.where(t == 0, torch.tensor(1.0, dtype=torch.float64), torch.sin(t) / t)
    kern = kern * window * (base / orig)
    n = len(x)
    xt = torch.tensor(x, dtype=torch.float64)[None, None]
    xt = F.pad(xt, (w, w + orig))
    y = F.conv1d(xt, kern, stride=orig)
    y = y.transpose(1, 2).reshape(-1)
    return y[: math.ceil(new * n / orig)].numpy().astype(np.float32)


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = f / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-300) / min_log_hz) / logstep, mels)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    freqs = f_sp * m
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), freqs)


def mel_filterbank():
    fftfreqs = np.fft.rfftfreq(N_FFT, d=1.0 / SR)
    mel_f = mel_to_hz(np.linspace(hz_to_mel(F_MIN), hz_to_mel(F_MAX), N_MELS + 2))
    fdiff = np.diff(mel_f)
    ramps = np.subtract.outer(mel_f, fftfreqs)
    weights = np.zeros((N_MELS, len(fftfreqs)))
    for i in range(N_MELS):
        lower = -ramps[i] / fdiff[i]
        upper = ramps[i + 2] / fdiff[i + 1]
        weights[i] = np.maximum(0, np.minimum(lower, upper))
    enorm = 2.0 / (mel_f[2 : N_MELS + 2] - mel_f[:N_MELS])
    return weights * enorm[:, None]


def front_end(x, rate):
    x = resample(x, rate, SR)
    spec = torch.stft(
        torch.tensor(x, dtype=torch.float64),
        n_fft=N_FFT,
        hop_length=HOP,
        window=torch.hann_window(N_FFT, periodic=True, dtype=torch.float64),
        center=True,
        pad_mode="reflect",
        return_complex=True,
    )
    power = (spec.abs() ** 2).numpy()
    mel = (mel_filterbank() @ power).astype(np.float32).astype(np.float64)
    logs = np.log(mel + LOG_OFFSET)
    std = logs.std()
    if np.all(logs == logs.flat[0]) or std == 0:
        norm = np.zeros_like(logs)
    else:
        norm = (logs - logs.mean()) / std
    norm = norm.astype(np.float32)
    img = F.interpolate(
        torch.tensor(norm, dtype=torch.float64)[None, None],
        size=(N_MELS, OUT),
        mode="bilinear",
        align_corners=False,
    )[0, 0].numpy()
    return np.repeat(img[:, :, None], 3, axis=2).astype("<f4")


def write_mst(path, t):
    with open(path, "wb") as f:
        f.write(b"224 224 3\n")
        f.write(t.tobytes())


def fixtures():
    t1 = np.arange(SR) / SR
    yield "silence_1s", np.zeros(SR), SR
    yield "sine_1khz_1s", 0.5 * np.sin(2 * math.pi * 1000.0 * t1), SR
    rate = 22050
    t2 = np.arange(2 * rate) / rate
    f0, f1, dur = 100.0, 3500.0, 2.0
    phase = 2 * math.pi * (f0 * t2 + (f1 - f0) / (2 * dur) * t2**2)
    yield "chirp_2s_22050", 0.5 * np.sin(phase), rate


def main():
    out = Path(sys.argv[1])
    out.mkdir(parents=True, exist_ok=True)
    for name, x, rate in fixtures():
        wav = out / f"{name}.wav"
        write_wav(wav, x, rate)
        samples, r = read_wav(wav)
        t = front_end(samples, r)
        write_mst(out / f"{name}.mst", t)
        gains = {}
        for g in (0.1, 3.0):
            gains[g] = float(np.abs(front_end((samples * np.float32(g)).astype(np.float32), r) - t).max())
        print(f"{name}: mean {t.mean():+.2e} std {t.std():.6f} gain max|d| {gains}")


if __name__ == "__main__":
    main()
