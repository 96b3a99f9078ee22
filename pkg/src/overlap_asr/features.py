"""Waveform handling, mixdown, MFCC extraction and context stacking."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.fft


class InputError(ValueError):
    """Raised when an operation receives input it cannot accept."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 8000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InputError(f"waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InputError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureConfig:
    sample_rate: int = 8000
    window: int = 200  # 25 ms at 8 kHz
    hop: int = 80  # 10 ms at 8 kHz
    n_fft: int = 256
    num_filters: int = 40
    num_ceps: int = 40
    low_freq: float = 64.0
    high_freq: float = 3800.0
    log_floor: float = 1e-10
    context: int = 2
    mean_norm: bool = False

    @property
    def frame_shift(self) -> float:
        return self.hop / self.sample_rate


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_shift: float = 0.01
    context: int = 2

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise InputError("feature frames must be a 2-D matrix")
        self._stacked = None

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def stacked(self) -> np.ndarray:
        if self._stacked is None:
            self._stacked = stack_context(self.frames, self.context)
        return self._stacked


def mix_channels(a: Waveform, b: Waveform) -> Waveform:
    """Average two channels sample by sample, zero-padding the shorter one."""
    if a.sample_rate != b.sample_rate:
        raise InputError(
            f"sample rates differ: {a.sample_rate} vs {b.sample_rate}"
        )
    n = max(len(a), len(b))
    out = np.zeros(n)
    out[: len(a)] += a.samples
    out[: len(b)] += b.samples
    return Waveform(out / 2.0, a.sample_rate)


def num_frames(num_samples: int, window: int, hop: int) -> int:
    if num_samples < window:
        return 0
    return 1 + (num_samples - window) // hop


def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


@lru_cache(maxsize=16)
def mel_filterbank(num_filters, n_fft, sample_rate, low_freq, high_freq):
    """Triangular filters on the mel scale, shape (num_filters, n_fft//2 + 1)."""
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    mel_points = np.linspace(hz_to_mel(low_freq), hz_to_mel(high_freq), num_filters + 2)
    bin_mels = hz_to_mel(bin_freqs)
    left, center, right = mel_points[:-2, None], mel_points[1:-1, None], mel_points[2:, None]
    up = (bin_mels[None, :] - left) / (center - left)
    down = (right - bin_mels[None, :]) / (right - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def compute_mfcc(w: Waveform, cfg: FeatureConfig | None = None) -> FeatureSequence:
    """MFCCs with a Hamming window, mel filterbank, log floor and orthonormal DCT-II.

    Frames are taken without padding, so a signal of ``L`` samples yields
    ``1 + (L - window) // hop`` frames.
    """
    cfg = cfg or FeatureConfig()
    if w.sample_rate != cfg.sample_rate:
        raise InputError(f"expected {cfg.sample_rate} Hz audio, got {w.sample_rate} Hz")
    n = num_frames(len(w), cfg.window, cfg.hop)
    if n == 0:
        raise InputError(
            f"waveform of {len(w)} samples is shorter than one window ({cfg.window})"
        )
    idx = np.arange(cfg.window)[None, :] + cfg.hop * np.arange(n)[:, None]
    frames = w.samples[idx] * np.hamming(cfg.window)[None, :]
    spec = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    fb = mel_filterbank(cfg.num_filters, cfg.n_fft, cfg.sample_rate, cfg.low_freq, cfg.high_freq)
    logmel = np.log(np.maximum(spec @ fb.T, cfg.log_floor))
    ceps = scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)[:, : cfg.num_ceps]
    if cfg.mean_norm:
        ceps = ceps - ceps.mean(axis=0, keepdims=True)
    return FeatureSequence(ceps, frame_shift=cfg.frame_shift, context=cfg.context)


def stack_context(frames: np.ndarray, context: int = 2) -> np.ndarray:
    """Concatenate each frame with its +-context neighbours, replicating edge frames."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise InputError("stack_context needs a non-empty 2-D matrix")
    n = frames.shape[0]
    offsets = np.arange(-context, context + 1)
    idx = np.clip(np.arange(n)[:, None] + offsets[None, :], 0, n - 1)
    return frames[idx].reshape(n, -1)


def read_wav(path) -> list[Waveform]:
    """Read a PCM16 WAV file; returns one Waveform per channel."""
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise InputError(f"{path}: only 16-bit PCM is supported")
        rate = fh.getframerate()
        channels = fh.getnchannels()
        raw = fh.readframes(fh.getnframes())
    data = np.frombuffer(raw, dtype="<i2").reshape(-1, channels).astype(np.float64) / 32768.0
    return [Waveform(data[:, c], rate) for c in range(channels)]


def write_wav(path, channels: list[Waveform]) -> None:
    """Write one or more equal-rate channels as little-endian PCM16."""
    if not channels:
        raise InputError("nothing to write")
    rate = channels[0].sample_rate
    if any(c.sample_rate != rate for c in channels):
        raise InputError("all channels must share a sample rate")
    n = max(len(c) for c in channels)
    data = np.zeros((n, len(channels)))
    for i, c in enumerate(channels):
        data[: len(c), i] = c.samples
    pcm = np.clip(np.round(data * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(len(channels))
        fh.setsampwidth(2)
        fh.setframerate(rate)
        fh.writeframes(pcm.tobytes())
