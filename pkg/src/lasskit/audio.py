"""Mono audio container and WAV I/O."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform with its sample rate.

    Samples are stored as a read-only float64 array. Construction rejects
    NaN/Inf and non-positive rates.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"AudioClip expects a 1-D array, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("AudioClip samples contain NaN or Inf")
        if int(self.sample_rate) <= 0 or int(self.sample_rate) != self.sample_rate:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> "AudioClip":
        return AudioClip(samples, self.sample_rate)

    def scaled(self, gain: float) -> "AudioClip":
        return AudioClip(self.samples * gain, self.sample_rate)


def read_wav(path: str | Path) -> AudioClip:
    """Read PCM16/PCM32/float WAV; multi-channel input is averaged to mono."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioClip(x, rate)


def write_wav(path: str | Path, clip: AudioClip, subtype: str = "float32") -> None:
    """Write a mono WAV as ``float32`` (default) or ``pcm16``."""
    if subtype == "float32":
        data = clip.samples.astype(np.float32)
    elif subtype == "pcm16":
        data = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unsupported WAV subtype {subtype!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), clip.sample_rate, data)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Windowed-sinc (Kaiser) polyphase resampling."""
    if clip.sample_rate == target_rate:
        return clip
    ratio = Fraction(int(target_rate), clip.sample_rate)
    y = resample_poly(clip.samples, ratio.numerator, ratio.denominator, window=("kaiser", 5.0))
    return AudioClip(y, target_rate)
