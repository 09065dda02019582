"""Synthetic corpora for smoke tests and the toy separation experiment."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio import AudioClip, write_wav
from .corpus import CorpusItem, write_manifest


def random_tone(rng: np.random.Generator, n: int, sample_rate: int, lo: float = 200.0, hi: float = 800.0) -> np.ndarray:
    """One to three sinusoids in [lo, hi] Hz with a slow amplitude wobble."""
    t = np.arange(n) / sample_rate
    y = np.zeros(n)
    for _ in range(rng.integers(1, 4)):
        f = rng.uniform(lo, hi)
        y += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    wobble = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.2, 2.0) * t + rng.uniform(0, 2 * np.pi))
    y *= wobble
    return y / np.max(np.abs(y))


def band_noise(rng: np.random.Generator, n: int, sample_rate: int, lo: float = 2000.0, hi: float = 4000.0) -> np.ndarray:
    """White noise restricted to [lo, hi] Hz by zeroing FFT bins outside the band."""
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    y = np.fft.irfft(spec, n=n)
    return y / np.max(np.abs(y))


def make_toy_corpus(
    out_dir: str | Path,
    n_per_class: int = 16,
    clip_seconds: float = 2.0,
    sample_rate: int = 8000,
    seed: int = 0,
) -> Path:
    """Two classes: ``tone`` (200-800 Hz sinusoids) and ``noise`` (2-4 kHz band noise)."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    n = int(round(clip_seconds * sample_rate))
    items = []
    for label, gen in (("tone", random_tone), ("noise", band_noise)):
        for i in range(n_per_class):
            y = gen(rng, n, sample_rate) * rng.uniform(0.2, 0.8)
            rel = f"audio/{label}_{i:03d}.wav"
            write_wav(out_dir / rel, AudioClip(y, sample_rate))
            items.append(CorpusItem(f"{label}_{i:03d}", rel, (label,), (), clip_seconds, sample_rate))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, items)
    return manifest


def make_multiclass_corpus(
    out_dir: str | Path,
    n_classes: int,
    per_class: int = 1,
    clip_seconds: float = 1.0,
    sample_rate: int = 8000,
    seed: int = 0,
    n_captions: int = 5,
    varied_lengths: bool = False,
) -> Path:
    """``n_classes`` classes, each a distinct tone frequency mixed with light noise.

    Every item carries ``n_captions`` captions naming its class.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    nyq = sample_rate / 2
    freqs = np.geomspace(80.0, 0.8 * nyq, n_classes)
    items = []
    for c in range(n_classes):
        label = f"class_{c:03d}"
        for i in range(per_class):
            secs = clip_seconds * (rng.uniform(0.6, 1.6) if varied_lengths else 1.0)
            n = int(round(secs * sample_rate))
            t = np.arange(n) / sample_rate
            y = np.sin(2 * np.pi * freqs[c] * (1 + 0.01 * rng.standard_normal()) * t)
            y += 0.05 * rng.standard_normal(n)
            y *= rng.uniform(0.1, 0.6) / np.max(np.abs(y))
            rel = f"audio/{label}_{i:03d}.wav"
            write_wav(out_dir / rel, AudioClip(y, sample_rate))
            caps = tuple(f"caption {k} for {label.replace('_', ' ')}" for k in range(n_captions))
            items.append(CorpusItem(f"{label}_{i:03d}", rel, (label,), caps, n / sample_rate, sample_rate))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, items)
    return manifest
