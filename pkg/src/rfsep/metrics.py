"""Objective evaluation: Fréchet distance over classifier embeddings, LSD, SI-SDR, query consistency."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng
from . import tensor as T
from .codec import MEL_CENTER, MEL_SCALE
from .nn import Conv2d, GroupNorm, Linear, Module
from .optim import AdamState, adam_step, clip_global_norm
from .tensor import Tensor

COV_RIDGE = 1e-6
EIG_CLAMP = 1e-10
SI_SDR_CAP = 60.0
EMBED_DIM = 32


class MetricError(ValueError):
    pass


@dataclass
class EmbedStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int


def embedding_stats(emb: np.ndarray, ridge: float = COV_RIDGE) -> EmbedStats:
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2:
        raise MetricError(f"embeddings must be [n, d], got shape {emb.shape}")
    n, d = emb.shape
    if n < 2:
        raise MetricError(f"need at least 2 embeddings for a covariance, got {n}")
    mu = emb.mean(axis=0)
    cov = np.cov(emb, rowvar=False).reshape(d, d) + ridge * np.eye(d)
    return EmbedStats(mu, 0.5 * (cov + cov.T), n)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    w = np.where(w < EIG_CLAMP, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(s1: EmbedStats, s2: EmbedStats) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^1/2)`` with the root taken symmetrically."""
    if s1.mean.shape != s2.mean.shape:
        raise MetricError(f"dimension mismatch {s1.mean.shape} vs {s2.mean.shape}")
    for s in (s1, s2):
        if not (np.isfinite(s.mean).all() and np.isfinite(s.cov).all()):
            raise MetricError("non-finite embedding statistics")
    r1 = _psd_sqrt(s1.cov)
    cross = _psd_sqrt(r1 @ s2.cov @ r1)
    diff = s1.mean - s2.mean
    d2 = diff @ diff + np.trace(s1.cov) + np.trace(s2.cov) - 2.0 * np.trace(cross)
    return float(max(d2, 0.0))


def log_spectral_distance(mel_a, mel_b) -> float:
    """RMS difference of log10-mel grids, in dB."""
    a, b = np.asarray(mel_a, np.float64), np.asarray(mel_b, np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(10.0 * np.sqrt(np.mean((a - b) ** 2)))


def si_sdr(est, ref, cap: float = SI_SDR_CAP) -> float:
    est, ref = np.asarray(est, np.float64), np.asarray(ref, np.float64)
    if est.shape != ref.shape:
        raise MetricError(f"length mismatch {est.shape} vs {ref.shape}")
    rr = ref @ ref
    if rr <= 0:
        raise MetricError("reference is silent")
    s = (est @ ref) / rr * ref
    e = est - s
    ss, ee = s @ s, e @ e
    if ee <= ss * 10.0 ** (-cap / 10.0):
        return cap
    return float(min(10.0 * np.log10(ss / ee), cap))


# ----------------------------------------------------------------------------
# query classifier

class QueryClassifier(Module):
    """Three stride-2 convs, mean and variance pooling over time, a 32-d embedding layer and a linear read-out.

    The variance half carries envelope modulation that a time average erases.
    """

    def __init__(self, n_classes: int, frames: int = 100, n_mels: int = 64, seed: int = 0):
        if n_classes < 2:
            raise MetricError("classifier needs at least 2 classes")
        self.n_classes = n_classes
        self.frames, self.n_mels = frames, n_mels
        self.c1 = Conv2d(1, 16, 3, 2, seed=seed, name="clf.c1")
        self.c2 = Conv2d(16, 32, 3, 2, seed=seed, name="clf.c2")
        self.n2 = GroupNorm(32)
        self.c3 = Conv2d(32, 32, 3, 2, seed=seed, name="clf.c3")
        self.n3 = GroupNorm(32)
        f3 = n_mels
        for _ in range(3):
            f3 = T.conv_output_size(f3, 3, 2, 1)
        self.flat = 2 * 32 * f3
        self.emb = Linear(self.flat, EMBED_DIM, seed=seed, name="clf.emb")
        self.out = Linear(EMBED_DIM, n_classes, seed=seed, name="clf.out")

    def _prep(self, mel) -> Tensor:
        x = np.asarray(mel.data if isinstance(mel, Tensor) else mel, dtype=np.float32)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None]
        if x.shape[1:] != (1, self.frames, self.n_mels):
            raise MetricError(f"mel must be [B, 1, {self.frames}, {self.n_mels}], got {x.shape}")
        return Tensor((x - MEL_CENTER) / MEL_SCALE)

    def embed(self, mel) -> Tensor:
        x = self._prep(mel)
        h = T.silu(self.c1(x))
        h = T.silu(self.n2(self.c2(h)))
        h = T.silu(self.n3(self.c3(h)))
        mu = T.mean(h, axis=2, keepdims=True)
        d = h - mu
        h = T.concat([T.mean(h, axis=2), T.mean(d * d, axis=2)], axis=1)
        return T.silu(self.emb(T.reshape(h, (h.shape[0], self.flat))))

    def logits(self, mel) -> Tensor:
        return self.out(self.embed(mel))

    def probs(self, mel) -> np.ndarray:
        return T.softmax(self.logits(mel), axis=-1).data


def train_query_classifier(mels: np.ndarray, labels: Sequence[int], n_classes: int, steps: int = 2000,
                           batch: int = 16, lr: float = 1e-3, seed: int = 0, level_db: float = 20.0):
    """Fit the classifier with random level shifts of up to ``±level_db`` as augmentation.

    Returns ``(classifier, losses)``.
    """
    mels = np.asarray(mels, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(mels) == 0:
        raise MetricError("empty classifier corpus")
    if len(np.unique(labels)) < 2:
        raise MetricError("classifier corpus needs at least 2 distinct classes")
    clf = QueryClassifier(n_classes, mels.shape[-2], mels.shape[-1], seed=seed)
    params = clf.parameters()
    state = AdamState.for_params(params)
    stream = rng.Stream(seed, "classifier")
    losses = []
    for _ in range(steps):
        idx = stream.integers(len(mels), batch)
        # a gain of g dB moves log10 magnitude by g / 20
        shift = stream.uniform((batch, 1, 1), -level_db, level_db) / 20.0
        x = np.maximum(mels[idx] + shift.astype(np.float32), np.float32(-5.0))
        with T.Tape() as tape:
            loss = T.cross_entropy(clf.logits(x), labels[idx])
        tape.backward(loss, wrt=params)
        grads = [p.grad for p in params]
        clip_global_norm(grads, 1.0)
        adam_step(params, grads, state, lr)
        losses.append(float(loss.data))
    return clf, losses


def accuracy(clf: QueryClassifier, mels: np.ndarray, labels: Sequence[int], batch: int = 64) -> float:
    preds = np.concatenate([clf.probs(mels[i:i + batch]).argmax(-1) for i in range(0, len(mels), batch)])
    return float(np.mean(preds == np.asarray(labels)))


def consistency_score(mel, query_id: int, clf: QueryClassifier) -> np.ndarray | float:
    """Classifier probability of ``query_id``; one value per input mel."""
    if not 0 <= int(query_id) < clf.n_classes:
        raise MetricError(f"query id {query_id} outside [0, {clf.n_classes})")
    p = clf.probs(mel)[:, int(query_id)]
    return float(p[0]) if np.ndim(mel) == 2 else p


def embedding_of(mel, clf: QueryClassifier) -> np.ndarray:
    """Penultimate 32-d activations ([32] for one mel, [B, 32] for a batch)."""
    e = clf.embed(mel).data
    return e[0] if np.ndim(mel) == 2 else e


def batched(fn, mels: np.ndarray, batch: int = 64) -> np.ndarray:
    return np.concatenate([fn(mels[i:i + batch]) for i in range(0, len(mels), batch)])


# ----------------------------------------------------------------------------
# report

def summarize(values: Sequence[float]) -> dict:
    v = [float(x) for x in values]
    return {"per_item": v, "mean": float(np.mean(v)), "median": float(np.median(v))}


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
