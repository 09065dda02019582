"""STFT analysis/synthesis and complex-spectrogram masking.

The separated spectrogram is ``|M| * |X| * exp(j(angle(X) + angle(M)))``.
Synthesis uses weighted overlap-add normalised by the squared-window sum,
so any (window, hop) pair with a non-vanishing squared-window sum inverts
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import check_NOLA, get_window

from .audio import AudioClip

EPS = 1e-8


class ColaError(ValueError):
    """Overlap-add denominator vanished somewhere in the output range."""


@dataclass(frozen=True)
class StftConfig:
    window_size: int = 1024
    hop_size: int = 320
    window: str = "hann"
    center_pad: bool = True

    def __post_init__(self):
        if not 0 < self.hop_size <= self.window_size:
            raise ValueError(
                f"need 0 < hop_size <= window_size, got hop={self.hop_size} win={self.window_size}"
            )
        if self.window != "hann":
            raise ValueError(f"only the hann window is supported, got {self.window!r}")
        if self.window_size % 2:
            raise ValueError("window_size must be even")

    @property
    def n_bins(self) -> int:
        return self.window_size // 2 + 1

    def window_array(self) -> np.ndarray:
        # Periodic Hann: the DFT-even variant used for spectral analysis.
        return get_window("hann", self.window_size, fftbins=True)

    def overlap_add_ok(self) -> bool:
        """True when the squared-window overlap-add never vanishes."""
        return bool(check_NOLA(self.window_array(), self.window_size, self.window_size - self.hop_size))

    def n_frames(self, n_samples: int) -> int:
        padded = n_samples + (self.window_size if self.center_pad else 0)
        if padded < self.window_size:
            return 0
        return 1 + (padded - self.window_size) // self.hop_size

    @classmethod
    def for_rate(cls, sample_rate: int) -> "StftConfig":
        """1024/320 at 32 kHz, scaled proportionally for other rates."""
        scale = sample_rate / 32000
        win = max(16, int(round(1024 * scale / 2)) * 2)
        hop = max(1, int(round(320 * scale)))
        return cls(win, hop)


@dataclass(frozen=True)
class ComplexSpectrogram:
    """T x F complex STFT plus what is needed to invert it to the exact length."""

    data: np.ndarray
    config: StftConfig
    source_len: int
    sample_rate: int

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2 or d.shape[1] != self.config.n_bins:
            raise ValueError(f"expected T x {self.config.n_bins} array, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("spectrogram contains NaN or Inf")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.data)


@dataclass(frozen=True)
class MaskPair:
    magnitude: np.ndarray
    phase_residual: np.ndarray

    def __post_init__(self):
        if self.magnitude.shape != self.phase_residual.shape:
            raise ValueError("magnitude and phase_residual shapes differ")
        if np.any(self.magnitude < 0) or not np.all(np.isfinite(self.magnitude)):
            raise ValueError("mask magnitude must be finite and non-negative")
        if np.any(np.abs(self.phase_residual) > np.pi + 1e-12):
            raise ValueError("phase residual outside [-pi, pi]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.magnitude.shape

    @classmethod
    def unit(cls, shape: tuple[int, int]) -> "MaskPair":
        return cls(np.ones(shape), np.zeros(shape))


def _pad(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    if not cfg.center_pad:
        return x
    half = cfg.window_size // 2
    # reflect needs at least half+1 samples
    mode = "reflect" if x.shape[0] > half else "constant"
    return np.pad(x, (half, half), mode=mode)


def stft(clip: AudioClip, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    x = clip.samples
    if x.shape[0] == 0:
        raise ValueError("cannot transform an empty signal")
    padded = _pad(x, cfg)
    if padded.shape[0] < cfg.window_size:
        raise ValueError(
            f"signal of {x.shape[0]} samples is shorter than the {cfg.window_size}-sample window"
        )
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.window_size)[:: cfg.hop_size]
    data = np.fft.rfft(frames * cfg.window_array(), axis=-1)
    return ComplexSpectrogram(data, cfg, x.shape[0], clip.sample_rate)


def window_sumsquare(cfg: StftConfig, n_frames: int) -> np.ndarray:
    w2 = cfg.window_array() ** 2
    out = np.zeros(cfg.window_size + cfg.hop_size * (n_frames - 1))
    for t in range(n_frames):
        out[t * cfg.hop_size : t * cfg.hop_size + cfg.window_size] += w2
    return out


def istft(spec: ComplexSpectrogram) -> AudioClip:
    cfg = spec.config
    n_frames = spec.data.shape[0]
    frames = np.fft.irfft(spec.data, n=cfg.window_size, axis=-1) * cfg.window_array()
    total = cfg.window_size + cfg.hop_size * (n_frames - 1)
    y = np.zeros(total)
    for t in range(n_frames):
        y[t * cfg.hop_size : t * cfg.hop_size + cfg.window_size] += frames[t]
    denom = window_sumsquare(cfg, n_frames)

    start = cfg.window_size // 2 if cfg.center_pad else 0
    stop = start + spec.source_len
    if stop > total:
        raise ColaError(f"{n_frames} frames cannot cover {spec.source_len} samples")
    if denom[start:stop].min() < EPS:
        raise ColaError("squared-window sum below 1e-8 inside the output range")
    y = y[start:stop] / denom[start:stop]
    return AudioClip(y, spec.sample_rate)


def apply_mask(spec: ComplexSpectrogram, mask: MaskPair) -> ComplexSpectrogram:
    if spec.shape != mask.shape:
        raise ValueError(f"spectrogram {spec.shape} and mask {mask.shape} differ in shape")
    rotated = mask.magnitude * np.exp(1j * mask.phase_residual)
    return ComplexSpectrogram(spec.data * rotated, spec.config, spec.source_len, spec.sample_rate)


def wrap_phase(phi: np.ndarray) -> np.ndarray:
    return np.angle(np.exp(1j * phi))


def ideal_mask(
    mix_spec: ComplexSpectrogram, target_spec: ComplexSpectrogram, mask_ceiling: float = 2.0
) -> MaskPair:
    """Oracle mask mapping the mixture spectrogram onto the target."""
    if mix_spec.shape != target_spec.shape:
        raise ValueError("mixture and target spectrograms differ in shape")
    mag = np.clip(target_spec.magnitude / np.maximum(mix_spec.magnitude, EPS), 0.0, mask_ceiling)
    phase = wrap_phase(target_spec.phase - mix_spec.phase)
    return MaskPair(mag, phase)


def parseval_energy(spec: ComplexSpectrogram) -> float:
    """Sum over frames of windowed-frame energy, computed in the frequency domain."""
    n = spec.config.window_size
    power = np.abs(spec.data) ** 2
    weights = np.full(spec.config.n_bins, 2.0)
    weights[0] = 1.0
    weights[-1] = 1.0
    return float(np.sum(power * weights) / n)


def windowed_energy(clip: AudioClip, cfg: StftConfig) -> float:
    """Time-domain counterpart of :func:`parseval_energy`."""
    padded = _pad(clip.samples, cfg)
    n_frames = cfg.n_frames(len(clip))
    w = window_sumsquare(cfg, n_frames)
    m = min(w.shape[0], padded.shape[0])
    return float(np.sum(padded[:m] ** 2 * w[:m]))
