"""Query normalisation and embedding, time embedding, channel concatenation."""

from __future__ import annotations

import json
import re
import string
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Module, _init
from .tensor import Tensor

QUERY_DIM = 128

_STRIP = "".join(c for c in string.punctuation if c not in "_-")
_STRIP_RE = re.compile("[" + re.escape(_STRIP) + "]")
# underscore or hyphen not flanked by a letter/digit on both sides
_EDGE_JOINER_RE = re.compile(r"(?<![0-9a-z])[_-]|[_-](?![0-9a-z])")


class QueryError(ValueError):
    pass


def normalize_query(text: str) -> str:
    """Lower-case, drop ASCII punctuation, collapse whitespace.

    Underscores and hyphens survive only inside a token (``chirp_up``,
    ``low-pass``).
    """
    s = _STRIP_RE.sub("", text.lower())
    prev = None
    while prev != s:
        prev, s = s, _EDGE_JOINER_RE.sub("", s)
    s = " ".join(s.split())
    if not s:
        raise QueryError(f"query {text!r} is empty after normalisation")
    return s


class QueryVocab:
    def __init__(self, names: Sequence[str]):
        norm = [normalize_query(n) for n in names]
        if len(set(norm)) != len(norm):
            raise QueryError(f"duplicate vocabulary entries in {list(names)}")
        self.names = norm
        self._ids = {n: i for i, n in enumerate(norm)}

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __eq__(self, other) -> bool:
        return isinstance(other, QueryVocab) and self.names == other.names

    def id(self, text: str) -> int:
        key = normalize_query(text)
        if key not in self._ids:
            raise QueryError(f"unknown query {text!r}; vocabulary is {self.names}")
        return self._ids[key]

    def to_json(self) -> str:
        return json.dumps(self.names)

    @classmethod
    def from_json(cls, text: str) -> "QueryVocab":
        names = json.loads(text)
        if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
            raise QueryError("vocabulary file must hold a JSON list of strings")
        return cls(names)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "QueryVocab":
        return cls.from_json(Path(path).read_text())


class QueryTable(Module):
    """One learned ``QUERY_DIM`` row per vocabulary entry."""

    def __init__(self, n_classes: int, dim: int = QUERY_DIM, seed: int = 0):
        self.table = _init(seed, "query_table", (n_classes, dim), dim)
        self.table.data *= np.float32(np.sqrt(0.5))

    def __call__(self, ids) -> Tensor:
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        n = self.table.shape[0]
        if ids.min(initial=0) < 0 or ids.max(initial=0) >= n:
            raise QueryError(f"class id out of range [0, {n})")
        onehot = np.zeros((len(ids), n), dtype=self.table.dtype)
        onehot[np.arange(len(ids)), ids] = 1.0
        return T.matmul(Tensor(onehot), self.table)


def embed_query(text: str, vocab: QueryVocab, table: QueryTable) -> Tensor:
    """Embedding row [QUERY_DIM] for a free-text query."""
    return T.reshape(table(vocab.id(text)), (table.table.shape[1],))


def time_embedding(t, dim: int = 64, dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    """Sinusoidal features ``[sin(w_k t)..., cos(w_k t)...]`` with ``w_k`` geometric in [1, 1e4]."""
    if dim % 2 or dim < 2:
        raise ValueError(f"time embedding dimension must be even and positive, got {dim}")
    half = dim // 2
    w = 10.0 ** (4.0 * np.arange(half) / max(half - 1, 1))
    t = np.asarray(t, dtype=np.float64)
    ang = t[..., None] * w
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(dtype)


def channel_concat(z_t: Tensor, zm: Tensor) -> Tensor:
    """Stack the state and the (never-noised) mixture latent along channels."""
    if z_t.shape[-2:] != zm.shape[-2:] or z_t.ndim != zm.ndim:
        raise ValueError(f"spatial mismatch between {z_t.shape} and {zm.shape}")
    return T.concat_channels(z_t, zm)
