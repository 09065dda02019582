"""Separation metrics (SDR, SI-SDR, SDRi, segmental SNR) and report aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .audio import AudioClip

DB_CAP = 100.0
SILENCE = 1e-10


def _arrays(est, ref) -> tuple[np.ndarray, np.ndarray]:
    e = est.samples if isinstance(est, AudioClip) else np.asarray(est, dtype=np.float64)
    r = ref.samples if isinstance(ref, AudioClip) else np.asarray(ref, dtype=np.float64)
    if e.shape != r.shape:
        raise ValueError(f"estimate and reference lengths differ: {e.shape} vs {r.shape}")
    return e, r


def _ratio_db(num: float, den: float, cap: float) -> float:
    if den == 0.0:
        return cap if num > 0 else -cap
    if num == 0.0:
        return -math.inf
    return min(10.0 * math.log10(num / den), cap)


def sdr(est, ref, cap: float = DB_CAP) -> float:
    """``10 log10(|ref|^2 / |ref - est|^2)``, capped at ``cap`` dB."""
    e, r = _arrays(est, ref)
    ref_energy = float(np.dot(r, r))
    if ref_energy <= 0.0:
        raise ValueError("SDR is undefined for a silent reference")
    d = r - e
    return _ratio_db(ref_energy, float(np.dot(d, d)), cap)


def si_sdr(est, ref, cap: float = DB_CAP) -> float:
    """Scale-invariant SDR of zero-mean signals.

    Returns ``cap`` for a perfect (scaled) estimate and ``-inf`` when the
    estimate is orthogonal to the reference.
    """
    e, r = _arrays(est, ref)
    e = e - e.mean()
    r = r - r.mean()
    ref_energy = float(np.dot(r, r))
    if ref_energy <= 0.0:
        raise ValueError("SI-SDR is undefined for a silent reference")
    target = (float(np.dot(e, r)) / ref_energy) * r
    noise = e - target
    return _ratio_db(float(np.dot(target, target)), float(np.dot(noise, noise)), cap)


def sdri(est, mix, ref, cap: float = DB_CAP) -> float:
    return sdr(est, ref, cap) - sdr(mix, ref, cap)


def ssnr(
    est,
    ref,
    sample_rate: int | None = None,
    frame_ms: float = 32.0,
    clamp: tuple[float, float] = (-10.0, 35.0),
) -> float:
    """Segmental SNR over 50 %-overlapping rectangular frames.

    Frames whose reference energy is at most 1e-10 are skipped; the rest are
    clamped to ``clamp`` before averaging.
    """
    e, r = _arrays(est, ref)
    if sample_rate is None:
        if not isinstance(ref, AudioClip):
            raise ValueError("sample_rate is required for raw arrays")
        sample_rate = ref.sample_rate
    frame = max(1, int(round(frame_ms * 1e-3 * sample_rate)))
    hop = max(1, frame // 2)
    n = r.shape[0]
    starts = range(0, max(n - frame, 0) + 1, hop)
    lo, hi = clamp
    vals = []
    for s in starts:
        rf = r[s : s + frame]
        ef = e[s : s + frame]
        p_ref = float(np.dot(rf, rf))
        if p_ref <= SILENCE:
            continue
        d = rf - ef
        p_err = float(np.dot(d, d))
        v = hi if p_err == 0.0 else 10.0 * math.log10(p_ref / p_err)
        vals.append(min(max(v, lo), hi))
    if not vals:
        raise ValueError("segmental SNR needs at least one non-silent reference frame")
    return math.fsum(vals) / len(vals)


@dataclass
class ItemMetrics:
    id: str
    sdr_db: float
    si_sdr_db: float
    sdri_db: float
    ssnr_db: float | None = None
    capped: bool = False

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "sdr_db": self.sdr_db,
            "si_sdr_db": self.si_sdr_db,
            "sdri_db": self.sdri_db,
            "ssnr_db": self.ssnr_db,
            "capped": self.capped,
        }


def measure_item(item_id: str, est, mix, ref, sample_rate: int | None = None, with_ssnr: bool = True) -> ItemMetrics:
    s = sdr(est, ref)
    si = si_sdr(est, ref)
    capped = abs(s) >= DB_CAP or abs(si) >= DB_CAP or math.isinf(si)
    si = min(max(si, -DB_CAP), DB_CAP)
    mix_sdr = sdr(mix, ref)
    seg = ssnr(est, ref, sample_rate) if with_ssnr else None
    return ItemMetrics(item_id, s, si, s - mix_sdr, seg, capped)


def mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def bootstrap_ci(values, n_boot: int = 1000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean; deterministic for a given seed."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 1:
        return float(x[0]), float(x[0])
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(n_boot, x.size))
    means = np.sort(x[idx].mean(axis=1))
    a = (1.0 - level) / 2.0
    return float(np.quantile(means, a)), float(np.quantile(means, 1.0 - a))


METRIC_KEYS = ("sdr_db", "si_sdr_db", "sdri_db", "ssnr_db")


@dataclass
class MetricReport:
    name: str
    items: list[ItemMetrics] = field(default_factory=list)
    n_failed: int = 0
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.items)

    def aggregate(self) -> dict:
        agg: dict = {"count": self.count, "failed": self.n_failed, "capped": sum(i.capped for i in self.items)}
        for key in METRIC_KEYS:
            vals = [getattr(i, key) for i in self.items if getattr(i, key) is not None]
            if not vals:
                continue
            lo, hi = bootstrap_ci(vals)
            agg[key] = {"mean": mean(vals), "ci95": [lo, hi]}
        return agg
