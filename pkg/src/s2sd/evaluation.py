"""Retrieval/clustering metrics and embedding-space diagnostics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .heads import EmbeddingBatch

SPECTRUM_EPS = 1e-12


@dataclass
class MetricsRecord:
    recall_at: dict
    nmi: float
    density_ratio: float
    spectral_decay: float
    split: str = "test"
    seed: int = 0
    step: int = 0

    def as_row(self) -> dict:
        row = {"split": self.split, "seed": self.seed, "step": self.step}
        row.update({f"recall@{k}": v for k, v in sorted(self.recall_at.items())})
        row.update(nmi=self.nmi, density_ratio=self.density_ratio,
                   spectral_decay=self.spectral_decay)
        return row


def _array(e) -> np.ndarray:
    if isinstance(e, EmbeddingBatch):
        return e.value
    return np.asarray(getattr(e, "value", e), dtype=np.float64)


def neighbor_order(x: np.ndarray, kmax: int) -> np.ndarray:
    """Indices of the ``kmax`` most cosine-similar rows, self excluded, ties to lower index."""
    # rounding makes mathematically equal similarities compare equal despite BLAS noise
    sim = np.round(x @ x.T, 12)
    np.fill_diagonal(sim, -np.inf)
    return np.argsort(-sim, axis=1, kind="stable")[:, :kmax]


def recall_at_k(embeddings, labels, ks: Sequence[int] = (1, 2)) -> dict:
    x = _array(embeddings)
    labels = np.asarray(labels)
    n = x.shape[0]
    kmax = max(ks)
    if kmax >= n:
        raise ValueError(f"k={kmax} needs at least {kmax + 1} samples, got {n}")
    hits = labels[neighbor_order(x, kmax)] == labels[:, None]
    return {k: float(hits[:, :k].any(axis=1).mean()) for k in ks}


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        i = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(1))
    return np.array(centers)


def kmeans(embeddings, k: int, seed: int = 0, max_iters: int = 100,
           return_history: bool = False):
    """Lloyd's algorithm with k-means++ seeding; empty clusters take the farthest point."""
    x = _array(embeddings)
    if not 1 <= k <= len(x):
        raise ValueError(f"k must be in [1, {len(x)}], got {k}")
    rng = np.random.Generator(np.random.Philox(seed))
    centers = _kmeans_pp(x, k, rng)
    history = []
    assign = None
    for _ in range(max_iters):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        new = d2.argmin(1)
        history.append(float(d2[np.arange(len(x)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = x[members].mean(0)
            else:
                far = d2[np.arange(len(x)), assign].argmax()
                centers[c] = x[far]
                assign[far] = c
                d2[far] = 0.0
    return (assign, history) if return_history else assign


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(assignment, labels) -> float:
    """I(A; L) / sqrt(H(A) H(L)), natural log; 1 when both partitions are trivial."""
    a, b = np.asarray(assignment), np.asarray(labels)
    if a.size == 0 or a.shape != b.shape:
        raise ValueError("nmi needs two non-empty label vectors of equal length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    ha, hb = _entropy(table.sum(1)), _entropy(table.sum(0))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    pij = table / table.sum()
    outer = pij.sum(1, keepdims=True) * pij.sum(0, keepdims=True)
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return float(np.clip(mi / np.sqrt(ha * hb), 0.0, 1.0))


def embedding_density(embeddings, labels) -> float:
    """Mean intra-class pairwise distance over mean distance between re-normalized centers."""
    x = _array(embeddings)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2 or counts.min() < 2:
        raise ValueError("density needs >= 2 classes with >= 2 samples each")
    intra, centers = [], []
    for c in classes:
        xc = x[labels == c]
        d = np.linalg.norm(xc[:, None] - xc[None], axis=-1)
        n = len(xc)
        intra.append(d.sum() / (n * (n - 1)))
        center = xc.mean(0)
        centers.append(center / max(np.linalg.norm(center), SPECTRUM_EPS))
    centers = np.array(centers)
    dc = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    k = len(classes)
    inter = dc.sum() / (k * (k - 1))
    return float(np.mean(intra) / inter)


def singular_values(embeddings) -> np.ndarray:
    return np.linalg.svd(_array(embeddings), compute_uv=False)


def spectral_decay(embeddings, skip: int = 0) -> float:
    """KL(uniform || normalized singular-value spectrum), optionally dropping the top ``skip``."""
    x = _array(embeddings)
    if x.shape[0] < x.shape[1]:
        raise ValueError("spectral_decay needs at least as many samples as dimensions")
    s = singular_values(x)[skip:]
    s = np.maximum(s / s.sum(), SPECTRUM_EPS)
    u = 1.0 / len(s)
    return float((u * np.log(u / s)).sum())


def evaluate_embeddings(embeddings, labels, ks=(1, 2), seed: int = 0, step: int = 0,
                        split: str = "test") -> MetricsRecord:
    x = _array(embeddings)
    labels = np.asarray(labels)
    assign = kmeans(x, len(np.unique(labels)), seed=seed)
    return MetricsRecord(
        recall_at=recall_at_k(x, labels, ks),
        nmi=nmi(assign, labels),
        density_ratio=embedding_density(x, labels),
        spectral_decay=spectral_decay(x),
        split=split, seed=seed, step=step,
    )
