"""Waveform to normalised log-mel filterbank features.

Recipe: resample to 16 kHz, cyclically repeat or truncate to 8 s, frame with
a 25 ms window every 10 ms, remove the per-frame DC offset, apply a Hamming
window, take the 512-point power spectrum, pool it through 128 triangular
HTK-mel filters spanning 20-8000 Hz and take the log with a 1e-10 floor.
Features are then standardised with fixed constants (-4.27, 4.57).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal

SAMPLE_RATE = 16000
CLIP_SECONDS = 8.0
FRAME_LENGTH_MS = 25
FRAME_SHIFT_MS = 10
N_FFT = 512
N_MELS = 128
LOW_FREQ = 20.0
HIGH_FREQ = 8000.0
LOG_FLOOR = 1e-10
FBANK_MEAN = -4.27
FBANK_STD = 4.57

FBNK_MAGIC = b"FBNK"
FBNK_VERSION = 1
_FBNK_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class SpecAugmentParams:
    max_time_mask_frames: int = 80
    max_freq_mask_bins: int = 20
    num_time_masks: int = 2
    num_freq_masks: int = 2

    def __post_init__(self):
        for name in ("max_time_mask_frames", "max_freq_mask_bins", "num_time_masks", "num_freq_masks"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.max_freq_mask_bins > N_MELS:
            raise ValueError(f"max_freq_mask_bins must be <= {N_MELS}")

    @classmethod
    def off(cls) -> "SpecAugmentParams":
        return cls(0, 0, 0, 0)


def resample(w: Waveform, target_rate: int, kaiser_beta: float = 8.6, half_width: int = 16) -> Waveform:
    """Band-limited polyphase resampling with a Kaiser-windowed sinc filter.

    The lowpass cutoff sits at 0.9 of the Nyquist frequency of the lower of
    the two rates. Output length is ``round(len * target / source)``.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if len(w.samples) == 0:
        raise ValueError("cannot resample an empty waveform")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    ratio = Fraction(int(target_rate), int(w.sample_rate))
    up, down = ratio.numerator, ratio.denominator
    n_out = int(round(len(w.samples) * target_rate / w.sample_rate))
    h = _polyphase_filter(up, down, kaiser_beta, half_width).copy()
    y = signal.resample_poly(w.samples, up, down, window=h)
    if len(y) < n_out:
        y = np.pad(y, (0, n_out - len(y)))
    return Waveform(y[:n_out], int(target_rate))


@lru_cache(maxsize=16)
def _polyphase_filter(up: int, down: int, beta: float, half_width: int) -> np.ndarray:
    factor = max(up, down)
    numtaps = 2 * half_width * factor + 1
    h = signal.firwin(numtaps, 0.9 / factor, window=("kaiser", beta))
    return h


def fix_length(w: Waveform, seconds: float = CLIP_SECONDS) -> Waveform:
    """Cyclically repeat short clips and truncate long ones to ``seconds``."""
    n = int(round(seconds * w.sample_rate))
    if len(w.samples) == 0:
        return Waveform(np.zeros(n), w.sample_rate)
    return Waveform(np.resize(w.samples, n), w.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   low_freq: float = LOW_FREQ, high_freq: float = HIGH_FREQ) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape (n_mels, n_fft // 2 + 1).

    Triangles are linear in mel. Each filter is rescaled so its largest weight
    is exactly 1. A filter narrower than the FFT bin spacing, which would catch
    no bin at all, degenerates to a single unit weight on the bin nearest its
    centre.
    """
    edges = np.linspace(hz_to_mel(low_freq), hz_to_mel(high_freq), n_mels + 2)
    bin_mel = hz_to_mel(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for k in range(n_mels):
        left, centre, right = edges[k], edges[k + 1], edges[k + 2]
        up = (bin_mel - left) / (centre - left)
        down = (right - bin_mel) / (right - centre)
        tri = np.clip(np.minimum(up, down), 0.0, None)
        if tri.max() > 0:
            fb[k] = tri / tri.max()
        else:
            fb[k, np.argmin(np.abs(bin_mel - centre))] = 1.0
    fb.setflags(write=False)
    return fb


def num_frames(n_samples: int, sample_rate: int = SAMPLE_RATE) -> int:
    win = sample_rate * FRAME_LENGTH_MS // 1000
    hop = sample_rate * FRAME_SHIFT_MS // 1000
    if n_samples < win:
        raise ValueError(f"input of {n_samples} samples is shorter than one {win}-sample window")
    return 1 + (n_samples - win) // hop


def fbank(w: Waveform) -> np.ndarray:
    """Log-mel filterbank energies, shape (frames, 128)."""
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"fbank expects {SAMPLE_RATE} Hz input, got {w.sample_rate} Hz")
    win = SAMPLE_RATE * FRAME_LENGTH_MS // 1000
    hop = SAMPLE_RATE * FRAME_SHIFT_MS // 1000
    n_frames = num_frames(len(w.samples))
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, win)[::hop][:n_frames]
    frames = frames - frames.mean(axis=1, keepdims=True)
    frames = frames * np.hamming(win)
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    energies = power @ mel_filterbank().T
    return np.log(np.maximum(energies, LOG_FLOOR))


def normalize(f: np.ndarray, mean: float = FBANK_MEAN, std: float = FBANK_STD) -> np.ndarray:
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    return (f - mean) / std


def denormalize(f: np.ndarray, mean: float = FBANK_MEAN, std: float = FBANK_STD) -> np.ndarray:
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    return f * std + mean


def spec_augment(f: np.ndarray, params: SpecAugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Time and frequency masking; masked cells take the feature's mean value.

    Mask widths are uniform on ``[0, max]`` and start positions uniform over
    the valid range. The input is not modified.
    """
    out = np.array(f, dtype=np.float64, copy=True)
    n_time, n_freq = out.shape
    fill = out.mean()
    for _ in range(params.num_time_masks):
        width = min(int(rng.integers(0, params.max_time_mask_frames + 1)), n_time)
        start = int(rng.integers(0, n_time - width + 1))
        out[start:start + width, :] = fill
    for _ in range(params.num_freq_masks):
        width = min(int(rng.integers(0, params.max_freq_mask_bins + 1)), n_freq)
        start = int(rng.integers(0, n_freq - width + 1))
        out[:, start:start + width] = fill
    return out


def featurize(w: Waveform, seconds: float = CLIP_SECONDS, mean: float = FBANK_MEAN,
              std: float = FBANK_STD) -> np.ndarray:
    """Full pipeline: resample, fix length, fbank, normalise."""
    if w.sample_rate != SAMPLE_RATE:
        w = resample(w, SAMPLE_RATE)
    return normalize(fbank(fix_length(w, seconds)), mean, std)


def write_fbank(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[1] != N_MELS:
        raise ValueError(f"expected (T, {N_MELS}) features, got {frames.shape}")
    with open(path, "wb") as fh:
        fh.write(_FBNK_HEADER.pack(FBNK_MAGIC, FBNK_VERSION, frames.shape[0], N_MELS))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_fbank(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _FBNK_HEADER.size:
        raise ValueError(f"{path}: truncated feature file")
    magic, version, n_frames, n_mels = _FBNK_HEADER.unpack_from(raw)
    if magic != FBNK_MAGIC or version != FBNK_VERSION:
        raise ValueError(f"{path}: not an FBNK v{FBNK_VERSION} file")
    expected = _FBNK_HEADER.size + 4 * n_frames * n_mels
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_FBNK_HEADER.size)
    return data.reshape(n_frames, n_mels).astype(np.float32)
