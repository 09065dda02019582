"""SNR-controlled mixing, integrated loudness and clipping guard."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .audio import AudioClip

BLOCK_SECONDS = 0.4
BLOCK_OVERLAP = 0.75
ABSOLUTE_GATE_LUFS = -70.0
RELATIVE_GATE_LU = -10.0
LOUDNESS_OFFSET = -0.691


class SilentSource(ValueError):
    """A source with zero energy cannot be scaled to a target SNR or loudness."""


@dataclass(frozen=True)
class MixResult:
    mixture: AudioClip
    target: AudioClip
    interferer_scaled: AudioClip
    alpha: float
    snr_db: float


def energy(clip: AudioClip) -> float:
    if len(clip) == 0:
        raise ValueError("energy of an empty clip is undefined")
    x = clip.samples
    return float(np.dot(x, x))


def measured_snr(target: AudioClip | np.ndarray, interferer: AudioClip | np.ndarray) -> float:
    t = target.samples if isinstance(target, AudioClip) else np.asarray(target, dtype=np.float64)
    i = interferer.samples if isinstance(interferer, AudioClip) else np.asarray(interferer, dtype=np.float64)
    return 10.0 * math.log10(float(np.dot(t, t)) / float(np.dot(i, i)))


def snr_scale_factor(e1: float, e2: float, snr_db: float) -> float:
    """Gain for the interferer so that ``10 log10(e1 / (alpha^2 e2)) == snr_db``.

    A positive ``snr_db`` makes the target louder than the interferer.
    """
    if not e1 > 0:
        raise SilentSource(f"target energy must be positive, got {e1}")
    if not e2 > 0:
        raise SilentSource(f"interferer energy must be positive, got {e2}")
    return math.sqrt((e1 / e2) * 10.0 ** (-snr_db / 10.0))


def mix_at_snr(s1: AudioClip, s2: AudioClip, snr_db: float) -> MixResult:
    if s1.sample_rate != s2.sample_rate:
        raise ValueError(f"sample rates differ: {s1.sample_rate} vs {s2.sample_rate}")
    if len(s1) != len(s2):
        raise ValueError(f"lengths differ: {len(s1)} vs {len(s2)}")
    alpha = snr_scale_factor(energy(s1), energy(s2), snr_db)
    scaled = s2.samples * alpha
    return MixResult(
        mixture=AudioClip(s1.samples + scaled, s1.sample_rate),
        target=s1,
        interferer_scaled=AudioClip(scaled, s1.sample_rate),
        alpha=alpha,
        snr_db=float(snr_db),
    )


def k_weighting_coefficients(sample_rate: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """High-shelf and high-pass biquads of the K-weighting curve.

    Analog prototype parameters are fitted so that the bilinear transform at
    48 kHz reproduces the tabulated BS.1770 coefficients; re-running the
    transform at ``sample_rate`` gives the filter for that rate.
    """
    fs = float(sample_rate)

    f0, gain_db, q = 1681.974450955533, 3.999843853973347, 0.7071752369554196
    k = math.tan(math.pi * f0 / fs)
    vh = 10.0 ** (gain_db / 20.0)
    vb = vh ** 0.4996667741545416
    a0 = 1.0 + k / q + k * k
    shelf_b = np.array([(vh + vb * k / q + k * k) / a0, 2.0 * (k * k - vh) / a0, (vh - vb * k / q + k * k) / a0])
    shelf_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0])

    f0, q = 38.13547087602444, 0.5003270373238773
    k = math.tan(math.pi * f0 / fs)
    a0 = 1.0 + k / q + k * k
    hp_b = np.array([1.0, -2.0, 1.0])
    hp_a = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0])
    return [(shelf_b, shelf_a), (hp_b, hp_a)]


def block_mean_squares(clip: AudioClip) -> np.ndarray:
    """Mean square of the K-weighted signal over 400 ms blocks with 75 % overlap."""
    block = int(round(BLOCK_SECONDS * clip.sample_rate))
    step = int(round(BLOCK_SECONDS * (1.0 - BLOCK_OVERLAP) * clip.sample_rate))
    if len(clip) < block:
        raise ValueError(
            f"loudness needs at least {BLOCK_SECONDS * 1000:.0f} ms of audio, got {clip.duration * 1000:.1f} ms"
        )
    y = clip.samples
    for b, a in k_weighting_coefficients(clip.sample_rate):
        y = lfilter(b, a, y)
    csum = np.concatenate([[0.0], np.cumsum(y * y)])
    starts = np.arange(0, len(y) - block + 1, step)
    return (csum[starts + block] - csum[starts]) / block


def integrated_loudness(clip: AudioClip) -> float:
    """Gated integrated loudness in LUFS; ``-inf`` when nothing passes the gates."""
    z = block_mean_squares(clip)
    with np.errstate(divide="ignore"):
        block_lufs = LOUDNESS_OFFSET + 10.0 * np.log10(z)
    above_abs = block_lufs > ABSOLUTE_GATE_LUFS
    if not np.any(above_abs):
        return float("-inf")
    relative_gate = LOUDNESS_OFFSET + 10.0 * math.log10(float(np.mean(z[above_abs]))) + RELATIVE_GATE_LU
    gated = above_abs & (block_lufs > relative_gate)
    return LOUDNESS_OFFSET + 10.0 * math.log10(float(np.mean(z[gated])))


def loudness_gain(clip: AudioClip, target_lufs: float, tol: float = 0.01, max_iter: int = 4) -> float:
    current = integrated_loudness(clip)
    if not math.isfinite(current):
        raise SilentSource("cannot normalise the loudness of a silent clip")
    gain = 10.0 ** ((target_lufs - current) / 20.0)
    # absolute gating can admit or drop blocks after the gain; refine the single gain
    for _ in range(max_iter):
        measured = integrated_loudness(clip.scaled(gain))
        if abs(measured - target_lufs) <= tol or not math.isfinite(measured):
            break
        gain *= 10.0 ** ((target_lufs - measured) / 20.0)
    return gain


def normalize_to_loudness(clip: AudioClip, target_lufs: float) -> AudioClip:
    return clip.scaled(loudness_gain(clip, target_lufs))


def clip_guard(clip: AudioClip, peak: float = 0.9) -> tuple[AudioClip, float]:
    """Rescale to ``peak`` when any sample exceeds full scale."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    m = float(np.max(np.abs(clip.samples))) if len(clip) else 0.0
    if m <= 1.0:
        return clip, 1.0
    scale = peak / m
    return clip.scaled(scale), scale
