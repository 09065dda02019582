"""Evaluation-set construction, batch evaluation and report emission.

Every builder derives one RNG per record from ``(seed, record_index)``, so the
worker count never changes the output. A built set is a directory holding
``set.json`` and float32 WAVs under ``audio/``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.io import wavfile

from .audio import AudioClip, read_wav, resample
from .corpus import CorpusItem, CorpusManifest, load_manifest
from .dsp import StftConfig, apply_mask, ideal_mask, istft, stft
from .metrics import ItemMetrics, MetricReport, measure_item
from .mixing import (
    SilentSource,
    clip_guard,
    loudness_gain,
    measured_snr,
    mix_at_snr,
)
from .query import QueryEmbedding, UnknownQuery, resolve_query

logger = logging.getLogger(__name__)

SET_VERSION = 1
REPORT_SCHEMA_VERSION = 1
PROTOCOLS = ("0db", "lufs", "caption", "concat", "snr_range")

__all__ = [
    "PROTOCOLS",
    "MixtureRecord",
    "BenchmarkSet",
    "load_manifest",
    "anchor_segment",
    "build_pairs_0db",
    "build_pairs_lufs",
    "build_pairs_caption",
    "build_pairs_concat",
    "build_pairs_snr_range",
    "evaluate",
    "emit_report",
]


@dataclass
class MixtureRecord:
    id: str
    mixture_path: str
    target_ref_path: str
    query: str
    protocol: str
    snr_db: float | None
    seed: list[int]
    clip_guard_scale: float
    target_id: str
    interferer_ids: list[str]
    mixture_sha256: str = ""
    target_sha256: str = ""
    extra: dict = field(default_factory=dict)


@dataclass
class BenchmarkSet:
    protocol: str
    params: dict
    corpus_fingerprint: str
    sample_rate: int
    records: list[MixtureRecord]
    skipped: list[dict] = field(default_factory=list)
    root: Path | None = None

    def to_json(self) -> str:
        doc = {
            "version": SET_VERSION,
            "protocol": self.protocol,
            "params": self.params,
            "corpus_fingerprint": self.corpus_fingerprint,
            "sample_rate": self.sample_rate,
            "count": len(self.records),
            "records": [asdict(r) for r in self.records],
            "skipped": self.skipped,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def load_audio(self, record: MixtureRecord) -> tuple[AudioClip, AudioClip]:
        if self.root is None:
            raise ValueError("benchmark set has no audio directory")
        return read_wav(self.root / record.mixture_path), read_wav(self.root / record.target_ref_path)

    @classmethod
    def load(cls, directory: str | Path) -> "BenchmarkSet":
        directory = Path(directory)
        doc = json.loads((directory / "set.json").read_text(encoding="utf-8"))
        if doc.get("version") != SET_VERSION:
            raise ValueError(f"unsupported set version {doc.get('version')}")
        records = [MixtureRecord(**r) for r in doc["records"]]
        return cls(
            doc["protocol"], doc["params"], doc["corpus_fingerprint"], doc["sample_rate"], records, doc["skipped"], directory
        )


# -- segment helpers --------------------------------------------------------


def record_rng(seed: int, *index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, index)]))


def anchor_segment(clip: AudioClip, seg_seconds: float, stride_seconds: float = 0.1) -> AudioClip:
    """Highest-energy window of ``seg_seconds`` on a ``stride_seconds`` grid; ties go to the earliest."""
    n = int(round(seg_seconds * clip.sample_rate))
    if n <= 0:
        raise ValueError("segment length must be positive")
    if len(clip) < n:
        raise ValueError(f"clip of {clip.duration:.3f} s is shorter than the {seg_seconds} s segment")
    stride = max(1, int(round(stride_seconds * clip.sample_rate)))
    x = clip.samples
    csum = np.concatenate([[0.0], np.cumsum(x * x)])
    starts = np.arange(0, len(x) - n + 1, stride)
    e = csum[starts + n] - csum[starts]
    best = int(np.flatnonzero(e >= e.max() * (1.0 - 1e-9))[0])
    s = int(starts[best])
    return AudioClip(x[s : s + n], clip.sample_rate)


def fit_length(clip: AudioClip, n: int, rng: np.random.Generator) -> AudioClip:
    """Crop from a random offset when longer than ``n``; loop-pad when shorter."""
    x = clip.samples
    if len(x) > n:
        off = int(rng.integers(0, len(x) - n + 1))
        return AudioClip(x[off : off + n], clip.sample_rate)
    if len(x) < n:
        return AudioClip(np.resize(x, n), clip.sample_rate)
    return clip


def _wav_bytes(clip: AudioClip) -> bytes:
    buf = io.BytesIO()
    wavfile.write(buf, clip.sample_rate, clip.samples.astype(np.float32))
    return buf.getvalue()


def _pick(items: list, rng: np.random.Generator):
    return items[int(rng.integers(len(items)))]


def _disjoint(corpus: CorpusManifest, item: CorpusItem) -> list[CorpusItem]:
    labels = set(item.labels)
    return [it for it in corpus.items if it.id != item.id and not labels & set(it.labels)]


def _caption_query(item: CorpusItem, rng: np.random.Generator) -> str:
    return _pick(list(item.captions), rng) if item.captions else item.labels[0]


@dataclass
class _Built:
    record: MixtureRecord | None
    mixture: AudioClip | None = None
    target: AudioClip | None = None
    skip_reason: str = ""


def _finish(
    protocol: str,
    index: int,
    seed: int,
    target: AudioClip,
    interferer: AudioClip,
    mixture: AudioClip,
    query: str,
    snr_db: float | None,
    target_id: str,
    interferer_ids: list[str],
    extra: dict | None = None,
) -> _Built:
    guarded, scale = clip_guard(mixture)
    ref = target.scaled(scale) if scale != 1.0 else target
    rid = f"{protocol}-{index:06d}"
    rec = MixtureRecord(
        id=rid,
        mixture_path=f"audio/{rid}_mix.wav",
        target_ref_path=f"audio/{rid}_ref.wav",
        query=query,
        protocol=protocol,
        snr_db=snr_db,
        seed=[int(seed), int(index)],
        clip_guard_scale=scale,
        target_id=target_id,
        interferer_ids=interferer_ids,
        extra=extra or {},
    )
    return _Built(rec, guarded, ref)


def _materialize(
    protocol: str,
    params: dict,
    corpus: CorpusManifest,
    sample_rate: int,
    builder: Callable[[int], _Built],
    n: int,
    out_dir: str | Path | None,
    jobs: int,
) -> BenchmarkSet:
    out = Path(out_dir) if out_dir is not None else None

    def work(i: int) -> _Built:
        b = builder(i)
        if b.record is None:
            return b
        mix_bytes, ref_bytes = _wav_bytes(b.mixture), _wav_bytes(b.target)
        b.record.mixture_sha256 = hashlib.sha256(mix_bytes).hexdigest()
        b.record.target_sha256 = hashlib.sha256(ref_bytes).hexdigest()
        if out is not None:
            (out / "audio").mkdir(parents=True, exist_ok=True)
            (out / b.record.mixture_path).write_bytes(mix_bytes)
            (out / b.record.target_ref_path).write_bytes(ref_bytes)
        return b

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            built = list(pool.map(work, range(n)))
    else:
        built = [work(i) for i in range(n)]
    records = [b.record for b in built if b.record is not None]
    skipped = [{"index": i, "reason": b.skip_reason} for i, b in enumerate(built) if b.record is None]
    if skipped:
        logger.warning("%s: %d record(s) skipped", protocol, len(skipped))
    bset = BenchmarkSet(protocol, params, corpus.fingerprint(), sample_rate, records, skipped, out)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "set.json").write_text(bset.to_json(), encoding="utf-8")
    return bset


def _rate(corpus: CorpusManifest, sample_rate: int | None) -> int:
    if sample_rate:
        return int(sample_rate)
    return corpus.audio(corpus.items[0].id).sample_rate


# -- protocols --------------------------------------------------------------


def build_pairs_0db(
    corpus: CorpusManifest,
    per_class: int,
    seg_seconds: float,
    seed: int = 0,
    sample_rate: int | None = None,
    out_dir: str | Path | None = None,
    jobs: int = 1,
    max_tries: int = 20,
) -> BenchmarkSet:
    """Per class: ``per_class`` anchor-segment pairs against a random other class at 0 dB."""
    sr = _rate(corpus, sample_rate)
    classes = corpus.classes()
    if len(classes) < 2:
        raise ValueError("the 0 dB protocol needs at least two classes")
    n_seg = int(round(seg_seconds * sr))
    eligible = {c: [it for it in corpus.items_with_label(c) if len(corpus.audio(it.id, sr)) >= n_seg] for c in classes}
    for c, pool in eligible.items():
        if not pool:
            raise ValueError(f"class {c!r} has no clip of at least {seg_seconds} s")

    def build(index: int) -> _Built:
        c = classes[index // per_class]
        rng = record_rng(seed, index)
        for _ in range(max_tries):
            tgt = _pick(eligible[c], rng)
            other = _pick([k for k in classes if k != c], rng)
            pool = [it for it in eligible[other] if c not in it.labels]
            if not pool:
                continue
            intf = _pick(pool, rng)
            s1 = anchor_segment(corpus.audio(tgt.id, sr), seg_seconds)
            s2 = anchor_segment(corpus.audio(intf.id, sr), seg_seconds)
            try:
                res = mix_at_snr(s1, s2, 0.0)
            except SilentSource:
                continue
            return _finish("0db", index, seed, res.target, res.interferer_scaled, res.mixture, c, 0.0, tgt.id, [intf.id])
        return _Built(None, skip_reason=f"no usable pair for class {c!r}")

    params = {"per_class": per_class, "seg_seconds": seg_seconds, "seed": seed}
    return _materialize("0db", params, corpus, sr, build, len(classes) * per_class, out_dir, jobs)


def build_pairs_lufs(
    corpus: CorpusManifest,
    clean_ids: list[str],
    n_per: int,
    lufs_range: tuple[float, float] = (-35.0, -25.0),
    seed: int = 0,
    sample_rate: int | None = None,
    out_dir: str | Path | None = None,
    jobs: int = 1,
) -> BenchmarkSet:
    """Each clean target with ``n_per`` distinct interferers, both loudness-normalised at random."""
    sr = _rate(corpus, sample_rate)
    clean = [corpus[i] for i in clean_ids]
    clean_set = set(clean_ids)
    rest = [it for it in corpus.items if it.id not in clean_set]
    if len(rest) < n_per:
        raise ValueError(f"interferer pool of {len(rest)} clips cannot supply {n_per} distinct interferers")
    lo, hi = lufs_range

    def build(index: int) -> _Built:
        ti, j = divmod(index, n_per)
        tgt = clean[ti]
        group = record_rng(seed, ti, 0x10F5)
        chosen = group.choice(len(rest), size=n_per, replace=False)
        intf = rest[int(chosen[j])]
        rng = record_rng(seed, index)
        s1 = corpus.audio(tgt.id, sr)
        s2 = fit_length(corpus.audio(intf.id, sr), len(s1), rng)
        l1, l2 = float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))
        try:
            t = s1.scaled(loudness_gain(s1, l1))
            i = s2.scaled(loudness_gain(s2, l2))
        except SilentSource as e:
            return _Built(None, skip_reason=str(e))
        mix = AudioClip(t.samples + i.samples, sr)
        snr = measured_snr(t, i)
        extra = {"target_lufs": l1, "interferer_lufs": l2}
        return _finish("lufs", index, seed, t, i, mix, tgt.labels[0], snr, tgt.id, [intf.id], extra)

    params = {"clean_ids": list(clean_ids), "n_per": n_per, "lufs_range": [lo, hi], "seed": seed}
    return _materialize("lufs", params, corpus, sr, build, len(clean) * n_per, out_dir, jobs)


def _targets(corpus: CorpusManifest, n_targets: int | None) -> list[CorpusItem]:
    return corpus.items if n_targets is None else corpus.items[:n_targets]


def build_pairs_caption(
    corpus: CorpusManifest,
    n_backgrounds: int = 5,
    seed: int = 0,
    n_targets: int | None = None,
    sample_rate: int | None = None,
    out_dir: str | Path | None = None,
    jobs: int = 1,
) -> BenchmarkSet:
    """Each target against ``n_backgrounds`` label-disjoint backgrounds at 0 dB; caption queries."""
    sr = _rate(corpus, sample_rate)
    targets = _targets(corpus, n_targets)
    pools = [_disjoint(corpus, t) for t in targets]

    def build(index: int) -> _Built:
        ti, j = divmod(index, n_backgrounds)
        tgt, pool = targets[ti], pools[ti]
        if not pool:
            return _Built(None, skip_reason=f"no label-disjoint background for {tgt.id}")
        group = record_rng(seed, ti, 0xCA9)
        picks = group.choice(len(pool), size=n_backgrounds, replace=len(pool) < n_backgrounds)
        bg = pool[int(picks[j])]
        rng = record_rng(seed, index)
        s1 = corpus.audio(tgt.id, sr)
        s2 = fit_length(corpus.audio(bg.id, sr), len(s1), rng)
        query = _caption_query(tgt, rng)
        try:
            res = mix_at_snr(s1, s2, 0.0)
        except SilentSource as e:
            return _Built(None, skip_reason=str(e))
        return _finish("caption", index, seed, res.target, res.interferer_scaled, res.mixture, query, 0.0, tgt.id, [bg.id])

    params = {"n_backgrounds": n_backgrounds, "n_targets": n_targets, "seed": seed}
    return _materialize("caption", params, corpus, sr, build, len(targets) * n_backgrounds, out_dir, jobs)


def build_pairs_concat(
    corpus: CorpusManifest,
    n_per: int = 5,
    seed: int = 0,
    n_targets: int | None = None,
    sample_rate: int | None = None,
    out_dir: str | Path | None = None,
    jobs: int = 1,
) -> BenchmarkSet:
    """Interferer = two random clips concatenated and truncated to the target length; 0 dB."""
    sr = _rate(corpus, sample_rate)
    targets = _targets(corpus, n_targets)
    if len(corpus) < 2:
        raise ValueError("the concat protocol needs at least two clips")

    def build(index: int) -> _Built:
        ti, _ = divmod(index, n_per)
        tgt = targets[ti]
        rng = record_rng(seed, index)
        pool = [it for it in corpus.items if it.id != tgt.id]
        a, b = _pick(pool, rng), _pick(pool, rng)
        s1 = corpus.audio(tgt.id, sr)
        joined = np.concatenate([corpus.audio(a.id, sr).samples, corpus.audio(b.id, sr).samples])
        n = len(s1)
        s2 = AudioClip(joined[:n] if len(joined) >= n else np.resize(joined, n), sr)
        query = _caption_query(tgt, rng)
        try:
            res = mix_at_snr(s1, s2, 0.0)
        except SilentSource as e:
            return _Built(None, skip_reason=str(e))
        return _finish("concat", index, seed, res.target, res.interferer_scaled, res.mixture, query, 0.0, tgt.id, [a.id, b.id])

    params = {"n_per": n_per, "n_targets": n_targets, "seed": seed}
    return _materialize("concat", params, corpus, sr, build, len(targets) * n_per, out_dir, jobs)


def build_pairs_snr_range(
    corpus: CorpusManifest,
    n_total: int,
    snr_range: tuple[float, float] = (-15.0, 15.0),
    seed: int = 0,
    sample_rate: int | None = None,
    out_dir: str | Path | None = None,
    jobs: int = 1,
    max_tries: int = 20,
) -> BenchmarkSet:
    """``n_total`` label-disjoint pairs at SNR ~ U(snr_range); caption queries."""
    sr = _rate(corpus, sample_rate)
    lo, hi = snr_range
    if lo > hi:
        raise ValueError("snr_range must satisfy lo <= hi")

    def build(index: int) -> _Built:
        rng = record_rng(seed, index)
        for _ in range(max_tries):
            tgt = _pick(corpus.items, rng)
            pool = _disjoint(corpus, tgt)
            if not pool:
                continue
            intf = _pick(pool, rng)
            snr = float(rng.uniform(lo, hi))
            s1 = corpus.audio(tgt.id, sr)
            s2 = fit_length(corpus.audio(intf.id, sr), len(s1), rng)
            query = _caption_query(tgt, rng)
            try:
                res = mix_at_snr(s1, s2, snr)
            except SilentSource:
                continue
            return _finish("snr_range", index, seed, res.target, res.interferer_scaled, res.mixture, query, snr, tgt.id, [intf.id])
        return _Built(None, skip_reason="pool exhausted: no label-disjoint non-silent pair")

    params = {"n_total": n_total, "snr_range": [lo, hi], "seed": seed}
    return _materialize("snr_range", params, corpus, sr, build, n_total, out_dir, jobs)


# -- evaluation -------------------------------------------------------------

Estimator = Callable[[AudioClip, AudioClip, str], AudioClip]


def passthrough_estimator(mix: AudioClip, ref: AudioClip, query: str) -> AudioClip:
    return mix


def oracle_estimator(mask_ceiling: float = 2.0) -> Estimator:
    """Ideal-mask upper bound computed from the reference."""

    def estimate(mix: AudioClip, ref: AudioClip, query: str) -> AudioClip:
        cfg = StftConfig.for_rate(mix.sample_rate)
        x, s = stft(mix, cfg), stft(ref, cfg)
        return istft(apply_mask(x, ideal_mask(x, s, mask_ceiling)))

    return estimate


def model_estimator(model, external: dict[str, QueryEmbedding] | None = None) -> Estimator:
    from .model import separate

    vocab = model.query.vocabulary() if model.query is not None else None
    # fixed once so concurrent workers never toggle batch-norm mode under each other
    model.eval()

    def estimate(mix: AudioClip, ref: AudioClip, query: str) -> AudioClip:
        e_q = resolve_query(query, vocab, external)
        x = resample(mix, model.cfg.sample_rate)
        est, _ = separate(model, x, e_q)
        est = resample(est, mix.sample_rate)
        y = est.samples[: len(mix)]
        if len(y) < len(mix):
            y = np.pad(y, (0, len(mix) - len(y)))
        return AudioClip(y, mix.sample_rate)

    return estimate


def evaluate(
    estimator: Estimator,
    bset: BenchmarkSet,
    name: str | None = None,
    jobs: int = 1,
    with_ssnr: bool = True,
) -> MetricReport:
    """Run ``estimator`` over every record; unknown queries are counted as failures."""

    def one(rec: MixtureRecord) -> ItemMetrics | str:
        mix, ref = bset.load_audio(rec)
        try:
            est = estimator(mix, ref, rec.query)
        except UnknownQuery as e:
            return f"unknown query {e.args[0]!r}"
        return measure_item(rec.id, est, mix, ref, mix.sample_rate, with_ssnr)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, bset.records))
    else:
        results = [one(r) for r in bset.records]
    report = MetricReport(name or bset.protocol)
    for rec, res in zip(bset.records, results):
        if isinstance(res, str):
            report.n_failed += 1
            report.failures[rec.id] = res
        else:
            report.items.append(res)
    return report


# -- reports ----------------------------------------------------------------

CSV_COLUMNS = ("dataset", "id", "sdr_db", "si_sdr_db", "sdri_db", "ssnr_db", "capped")


def _as_mapping(reports) -> dict[str, MetricReport]:
    if isinstance(reports, MetricReport):
        return {reports.name: reports}
    return dict(reports)


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def report_to_json(reports) -> str:
    reports = _as_mapping(reports)
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "reports": {
            name: {
                "aggregate": r.aggregate(),
                "items": [i.to_dict() for i in r.items],
                "failed": r.n_failed,
                "failures": r.failures,
            }
            for name, r in reports.items()
        },
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def report_from_json(text: str) -> dict[str, MetricReport]:
    doc = json.loads(text)
    if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {doc.get('schema_version')}")
    out = {}
    for name, body in doc["reports"].items():
        items = [ItemMetrics(**i) for i in body["items"]]
        out[name] = MetricReport(name, items, body["failed"], dict(body["failures"]))
    return out


def report_to_markdown(reports, system: str = "model") -> str:
    reports = _as_mapping(reports)
    names = list(reports)
    head = "| System | " + " | ".join(f"{n} SI-SDR | {n} SDRi" for n in names) + " |"
    rule = "|---|" + "---|---|" * len(names)
    cells = []
    for n in names:
        agg = reports[n].aggregate()
        cells.append(f"{agg['si_sdr_db']['mean']:.2f} | {agg['sdri_db']['mean']:.2f}")
    return "\n".join([head, rule, f"| {system} | " + " | ".join(cells) + " |"]) + "\n"


def report_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for name, r in _as_mapping(reports).items():
        for i in r.items:
            w.writerow([name, i.id, _fmt(i.sdr_db), _fmt(i.si_sdr_db), _fmt(i.sdri_db), _fmt(i.ssnr_db), int(i.capped)])
    return buf.getvalue()


def emit_report(reports, fmt: str, path: str | Path | None = None, system: str = "model") -> str:
    """Render as ``csv``, ``json`` or ``markdown``; write to ``path`` when given."""
    mapping = _as_mapping(reports)
    if not mapping or any(r.count == 0 for r in mapping.values()):
        empty = [n for n, r in mapping.items() if r.count == 0] or ["<none>"]
        raise ValueError(f"refusing to emit a report with no evaluated records: {', '.join(empty)}")
    if fmt == "csv":
        text = report_to_csv(mapping)
    elif fmt == "json":
        text = report_to_json(mapping)
    elif fmt in ("markdown", "md"):
        text = report_to_markdown(mapping, system)
    else:
        raise ValueError(f"unknown report format {fmt!r}; choose csv, json or markdown")
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def mean_metric(report: MetricReport, key: str) -> float:
    vals = [getattr(i, key) for i in report.items]
    return math.fsum(vals) / len(vals)
