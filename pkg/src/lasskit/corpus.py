"""Labelled audio corpus described by a JSONL manifest.

One object per line::

    {"id": "...", "path": "rel/or/abs.wav", "labels": ["dog"], "captions": [],
     "duration_s": 5.0, "sample_rate": 32000}

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .audio import AudioClip, read_wav, resample

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorpusItem:
    id: str
    path: str
    labels: tuple[str, ...]
    captions: tuple[str, ...] = ()
    duration_s: float = 0.0
    sample_rate: int = 0

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "path": self.path,
            "labels": list(self.labels),
            "captions": list(self.captions),
            "duration_s": self.duration_s,
            "sample_rate": self.sample_rate,
        }


@dataclass
class CorpusManifest:
    items: list[CorpusItem]
    root: Path = field(default_factory=Path)
    skipped: int = 0

    def __post_init__(self):
        seen = set()
        for it in self.items:
            if it.id in seen:
                raise ValueError(f"duplicate corpus id {it.id!r}")
            seen.add(it.id)
            if not it.labels:
                raise ValueError(f"corpus item {it.id!r} has no labels")
        self._by_id = {it.id: it for it in self.items}
        self._cache: dict[tuple[str, int], AudioClip] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, item_id: str) -> CorpusItem:
        return self._by_id[item_id]

    def classes(self) -> list[str]:
        return sorted({lab for it in self.items for lab in it.labels})

    def items_with_label(self, label: str) -> list[CorpusItem]:
        return [it for it in self.items if label in it.labels]

    def resolve(self, item: CorpusItem) -> Path:
        p = Path(item.path)
        return p if p.is_absolute() else self.root / p

    def audio(self, item_id: str, sample_rate: int | None = None) -> AudioClip:
        """Decoded (and optionally resampled) audio, cached per (id, rate)."""
        key = (item_id, sample_rate or 0)
        with self._lock:
            clip = self._cache.get(key)
        if clip is None:
            clip = read_wav(self.resolve(self._by_id[item_id]))
            if sample_rate:
                clip = resample(clip, sample_rate)
            with self._lock:
                self._cache[key] = clip
        return clip

    def fingerprint(self) -> str:
        """SHA-256 over item metadata and audio bytes, independent of file location."""
        h = hashlib.sha256()
        for it in sorted(self.items, key=lambda x: x.id):
            meta = {"id": it.id, "labels": list(it.labels), "captions": list(it.captions)}
            h.update(json.dumps(meta, sort_keys=True).encode())
            h.update(hashlib.sha256(self.resolve(it).read_bytes()).digest())
        return h.hexdigest()


def load_manifest(path: str | Path) -> CorpusManifest:
    path = Path(path)
    root = path.parent
    items: list[CorpusItem] = []
    skipped = 0
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                item = CorpusItem(
                    id=str(obj["id"]),
                    path=str(obj["path"]),
                    labels=tuple(obj["labels"]),
                    captions=tuple(obj.get("captions") or ()),
                    duration_s=float(obj.get("duration_s", 0.0)),
                    sample_rate=int(obj.get("sample_rate", 0)),
                )
            except (ValueError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: malformed manifest line ({e})") from None
            if item.id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate corpus id {item.id!r}")
            seen.add(item.id)
            p = Path(item.path) if Path(item.path).is_absolute() else root / item.path
            if not p.is_file():
                logger.warning("skipping %s: audio file %s not readable", item.id, p)
                skipped += 1
                continue
            items.append(item)
    if not items:
        raise ValueError(f"{path}: no valid corpus items ({skipped} skipped)")
    if skipped:
        logger.warning("%s: %d item(s) skipped", path, skipped)
    return CorpusManifest(items, root, skipped)


def write_manifest(path: str | Path, items: list[CorpusItem]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it in items:
            fh.write(json.dumps(it.to_dict(), sort_keys=True) + "\n")
