"""Waveform-to-Fbank front end: framing, Hann-windowed FFT, mel filterbank, log energies.

Conventions beyond the fixed 80/25ms/10ms setup: Hann window, fft size =
next power of two >= frame length, natural log with a 1e-10 floor, no
pre-emphasis and no mean normalization.
"""

from __future__ import annotations

import wave as _wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    """Multi-channel audio; samples shaped (channels, length) in [-1, 1)."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise FeatureError(f"waveform must be 1-D or 2-D, got shape {arr.shape}")
        if self.sample_rate <= 0:
            raise FeatureError("sample rate must be positive")
        object.__setattr__(self, "samples", arr)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def channel(self, i: int) -> np.ndarray:
        return self.samples[i]

    def slice(self, start_s: float, end_s: float) -> "Waveform":
        a = max(0, int(round(start_s * self.sample_rate)))
        b = min(self.n_samples, int(round(end_s * self.sample_rate)))
        return Waveform(self.samples[:, a:b], self.sample_rate)


@dataclass(frozen=True)
class FbankConfig:
    sample_rate: int = 16000
    n_mels: int = 80
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    fft_size: int | None = None
    f_min: float = 20.0
    f_max: float | None = None  # defaults to 0.95 * Nyquist (7600 Hz at 16 kHz)
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.frame_shift_ms > self.frame_length_ms:
            raise FeatureError("frame shift must not exceed frame length")
        if self.n_mels < 1:
            raise FeatureError("n_mels must be >= 1")
        if self.effective_f_max() <= self.f_min:
            raise FeatureError("f_min must be below f_max")
        if self.effective_f_max() > self.sample_rate / 2:
            raise FeatureError("f_max must not exceed Nyquist")

    @property
    def frame_length(self) -> int:
        return int(round(self.frame_length_ms * self.sample_rate / 1000.0))

    @property
    def frame_shift(self) -> int:
        return int(round(self.frame_shift_ms * self.sample_rate / 1000.0))

    def effective_fft_size(self) -> int:
        if self.fft_size is not None:
            return self.fft_size
        n = 1
        while n < self.frame_length:
            n *= 2
        return n

    def effective_f_max(self) -> float:
        return self.f_max if self.f_max is not None else 0.95 * self.sample_rate / 2.0


@dataclass(frozen=True)
class MultiChannelFeatures:
    """Fbank stack shaped (channels, frames, mels)."""

    data: np.ndarray
    frame_shift: float = 0.01

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise FeatureError(f"features must be 3-D (C, T, F), got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


def frame_count(n_samples: int, cfg: FbankConfig) -> int:
    if n_samples < cfg.frame_length:
        raise FeatureError(
            f"signal of {n_samples} samples is shorter than one frame ({cfg.frame_length})"
        )
    return (n_samples - cfg.frame_length) // cfg.frame_shift + 1


def _hann(n: int) -> np.ndarray:
    # Periodic Hann, matching the usual spectrogram convention.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(samples: np.ndarray, cfg: FbankConfig) -> np.ndarray:
    """Per-frame power spectrum of Hann-windowed frames, shape (T, fft/2 + 1)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise FeatureError("stft_power takes a single channel")
    t = frame_count(samples.size, cfg)
    shift, flen = cfg.frame_shift, cfg.frame_length
    idx = np.arange(flen)[None, :] + shift * np.arange(t)[:, None]
    frames = samples[idx] * _hann(flen)[None, :]
    spec = np.fft.rfft(frames, n=cfg.effective_fft_size(), axis=1)
    return (spec.real**2 + spec.imag**2).astype(np.float64)


def hz_to_mel(f) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_matrix(cfg: FbankConfig) -> np.ndarray:
    """Amplitude-normalized triangular mel filters, shape (n_mels, fft/2 + 1).

    Triangles live on the continuous frequency axis (apex 1 at the center)
    and are sampled at the FFT bin frequencies. Any bin is inside at most two
    adjacent triangles whose weights sum to exactly 1, so column sums never
    exceed 1. A filter so narrow that no bin falls inside it means n_mels is
    too large for the FFT resolution and raises.
    """
    nfft = cfg.effective_fft_size()
    mels = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.effective_f_max()), cfg.n_mels + 2)
    edges = mel_to_hz(mels)
    bin_hz = np.arange(nfft // 2 + 1) * cfg.sample_rate / nfft
    mat = np.zeros((cfg.n_mels, nfft // 2 + 1))
    for j in range(cfg.n_mels):
        lo, mid, hi = edges[j], edges[j + 1], edges[j + 2]
        up = (bin_hz - lo) / (mid - lo)
        down = (hi - bin_hz) / (hi - mid)
        mat[j] = np.maximum(0.0, np.minimum(up, down))
        if not np.any(mat[j] > 0):
            raise FeatureError(
                f"{cfg.n_mels} mel filters do not fit fft_size {nfft} at {cfg.sample_rate} Hz"
            )
    return mat


def filter_centers_hz(cfg: FbankConfig) -> np.ndarray:
    mels = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.effective_f_max()), cfg.n_mels + 2)
    return mel_to_hz(mels)[1:-1]


def fbank(wave: Waveform, cfg: FbankConfig) -> MultiChannelFeatures:
    """Log mel-filterbank energies per channel, shape (C, T, n_mels)."""
    mel = mel_matrix(cfg)
    chans = []
    for c in range(wave.n_channels):
        power = stft_power(wave.channel(c), cfg)
        energies = power @ mel.T
        chans.append(np.log(np.maximum(energies, cfg.log_floor)))
    return MultiChannelFeatures(np.stack(chans, axis=0), cfg.frame_shift_ms / 1000.0)


# -- WAV I/O (16-bit PCM little-endian) ------------------------------------------


def read_wav(path) -> Waveform:
    with _wave.open(str(Path(path)), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise FeatureError(f"{path}: only 16-bit PCM is supported")
        n_chan = fh.getnchannels()
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    flat = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    samples = flat.reshape(-1, n_chan).T
    return Waveform(samples, rate)


def write_wav(path, wave: Waveform) -> None:
    clipped = np.clip(wave.samples, -1.0, 1.0 - 1.0 / 32768.0)
    pcm = np.round(clipped * 32768.0).astype("<i2")
    with _wave.open(str(Path(path)), "wb") as fh:
        fh.setnchannels(wave.n_channels)
        fh.setsampwidth(2)
        fh.setframerate(wave.sample_rate)
        fh.writeframes(pcm.T.tobytes())
