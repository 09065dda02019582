"""Query embeddings: a trainable label table and a loader for external vectors.

External files are JSONL, one ``{"key": ..., "vec": [...]}`` object per line.
Keys are canonicalised (lowercase, trimmed, whitespace collapsed) on load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NORM_EPS = 1e-12


class UnknownQuery(KeyError):
    pass


def canonicalize(text: str) -> str:
    return " ".join(text.strip().lower().split())


@dataclass(frozen=True)
class QueryEmbedding:
    vector: np.ndarray
    source: str = "table"

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("query embedding must be a finite 1-D vector")
        if self.source not in ("table", "external"):
            raise ValueError(f"unknown embedding source {self.source!r}")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def normalize(self) -> "QueryEmbedding":
        return QueryEmbedding(normalize_vector(self.vector), self.source)


def normalize_vector(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm < NORM_EPS:
        raise ValueError("cannot normalise a zero vector")
    return v / norm


@dataclass
class Vocabulary:
    """Canonical query strings and the (trainable) table of their vectors."""

    entries: list[str]
    embedding_table: np.ndarray

    def __post_init__(self):
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("vocabulary entries must be unique")
        if self.embedding_table.shape[0] != len(self.entries):
            raise ValueError("table row count must equal vocabulary size")
        self._index = {k: i for i, k in enumerate(self.entries)}

    @property
    def dim(self) -> int:
        return self.embedding_table.shape[1]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, query: str) -> bool:
        return canonicalize(query) in self._index

    def index(self, query: str) -> int:
        key = canonicalize(query)
        try:
            return self._index[key]
        except KeyError:
            raise UnknownQuery(query) from None


def build_vocab(labels: list[str], d: int = 64, seed: int = 0) -> Vocabulary:
    """Deduplicated vocabulary with a U(-1/sqrt(d), 1/sqrt(d)) table."""
    if not labels:
        raise ValueError("cannot build a vocabulary from an empty label list")
    entries = list(dict.fromkeys(canonicalize(x) for x in labels))
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)
    table = rng.uniform(-bound, bound, size=(len(entries), d))
    return Vocabulary(entries, table)


def embed_query(vocab: Vocabulary, query: str) -> QueryEmbedding:
    row = vocab.embedding_table[vocab.index(query)]
    return QueryEmbedding(normalize_vector(row), "table")


def load_external_embeddings(path: str | Path) -> dict[str, QueryEmbedding]:
    """Read a JSONL (or ``.npz`` written by :func:`save_embedding_table`) file."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as z:
            keys, vecs = list(z["keys"]), z["vectors"]
        return {str(k): QueryEmbedding(normalize_vector(v.astype(np.float64)), "external") for k, v in zip(keys, vecs)}

    out: dict[str, QueryEmbedding] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                key, vec = obj["key"], np.asarray(obj["vec"], dtype=np.float64)
                if not isinstance(key, str) or vec.ndim != 1 or vec.size == 0:
                    raise ValueError("expected a string key and a non-empty numeric vector")
            except (ValueError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: malformed embedding line ({e})") from None
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ValueError(f"{path}:{lineno}: dimension {vec.size} differs from {dim} on earlier lines")
            try:
                out[canonicalize(key)] = QueryEmbedding(normalize_vector(vec), "external")
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    return out


def save_embedding_table(path: str | Path, embeddings: dict[str, QueryEmbedding]) -> None:
    keys = sorted(embeddings)
    vecs = np.stack([embeddings[k].vector for k in keys]) if keys else np.zeros((0, 0))
    np.savez(path, keys=np.array(keys, dtype=str), vectors=vecs.astype(np.float32))


def resolve_query(
    query: str, vocab: Vocabulary | None, external: dict[str, QueryEmbedding] | None = None
) -> QueryEmbedding:
    """Table lookup first, then external vectors."""
    if vocab is not None and query in vocab:
        return embed_query(vocab, query)
    if external:
        key = canonicalize(query)
        if key in external:
            return external[key]
    raise UnknownQuery(query)
