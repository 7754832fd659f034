"""Metric-learning objectives and batch/tuple samplers."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .heads import EmbeddingBatch

DIST_EPS = 1e-12
# distance-weighted sampling band
LOWER_CUTOFF = 0.5
UPPER_CUTOFF = 1.4


class EmptyTupleWarning(UserWarning):
    """No usable tuples/pairs in the batch; the loss falls back to 0."""


@dataclass
class BatchTuples:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self) -> int:
        return len(self.anchors)

    def validate(self, labels) -> None:
        labels = np.asarray(labels)
        a, p, n = self.anchors, self.positives, self.negatives
        if np.any(a == p) or np.any(labels[a] != labels[p]) or np.any(labels[a] == labels[n]):
            raise ValueError("tuples must satisfy y_a == y_p != y_n and a != p")


@dataclass
class MarginState:
    """Learnable boundary ``beta`` (scalar or one entry per class) and fixed margin."""

    beta: np.ndarray
    margin: float = 0.2

    @classmethod
    def create(cls, beta0: float = 0.6, margin: float = 0.2, n_classes: int | None = None):
        shape = () if n_classes is None else (n_classes,)
        return cls(np.full(shape, beta0, dtype=np.float64), margin)

    @property
    def per_class(self) -> bool:
        return np.ndim(self.beta) == 1

    def clamp(self, floor: float = 1e-4) -> None:
        np.maximum(self.beta, floor, out=self.beta)


def _emb(e) -> Node:
    return e.embeddings if isinstance(e, EmbeddingBatch) else dc.as_node(e)


def pairwise_cosine(e, atol: float = 1e-6) -> Node:
    x = _emb(e)
    norms = np.linalg.norm(x.value, axis=1)
    if np.any(np.abs(norms - 1.0) > atol):
        raise ValueError("pairwise_cosine expects unit-normalized rows "
                         f"(max deviation {np.abs(norms - 1).max():.3g})")
    return dc.matmul(x, dc.transpose(x))


def pairwise_euclidean(e) -> np.ndarray:
    """Non-differentiable distance matrix sqrt(2 - 2 cos) for sampling and evaluation."""
    x = _emb(e).value
    sim = x @ x.T
    d = np.sqrt(np.clip(2.0 - 2.0 * sim, 0.0, 4.0))
    np.fill_diagonal(d, 0.0)
    return d


def tuple_distances(e, idx_a, idx_b) -> Node:
    """Differentiable Euclidean distances between rows idx_a[i] and idx_b[i]."""
    x = _emb(e)
    diff = dc.take(x, np.asarray(idx_a)) - dc.take(x, np.asarray(idx_b))
    return dc.sqrt(dc.sum(diff * diff, axis=1) + DIST_EPS)


def triplet_loss(e, tuples: BatchTuples, m: float = 0.2) -> Node:
    if len(tuples) == 0:
        warnings.warn("triplet_loss: empty tuple set", EmptyTupleWarning, stacklevel=2)
        return Node(0.0)
    d_ap = tuple_distances(e, tuples.anchors, tuples.positives)
    d_an = tuple_distances(e, tuples.anchors, tuples.negatives)
    return dc.mean(dc.relu(d_ap - d_an + m))


def margin_loss(e, tuples: BatchTuples, state: MarginState, labels=None, beta=None) -> Node:
    """Mean over tuples of [d_ap - beta + m]_+ + [beta - d_an + m]_+.

    ``beta`` overrides ``state.beta`` with a differentiable node during training.
    Per-class boundaries are indexed by the anchor label.
    """
    if len(tuples) == 0:
        warnings.warn("margin_loss: empty tuple set", EmptyTupleWarning, stacklevel=2)
        return Node(0.0)
    b = dc.as_node(state.beta if beta is None else beta)
    if b.value.ndim == 1:
        if labels is None:
            raise ValueError("per-class beta needs labels")
        b = dc.take(b, np.asarray(labels)[tuples.anchors])
    d_ap = tuple_distances(e, tuples.anchors, tuples.positives)
    d_an = tuple_distances(e, tuples.anchors, tuples.negatives)
    pos = dc.relu(d_ap - b + state.margin)
    neg = dc.relu(b - d_an + state.margin)
    return dc.mean(pos + neg)


def _mine(sim: np.ndarray, pos: np.ndarray, neg: np.ndarray, eps: float):
    hardest_neg = np.where(neg, sim, -np.inf).max(axis=1, keepdims=True)
    easiest_pos = np.where(pos, sim, np.inf).min(axis=1, keepdims=True)
    pos_mask = pos & (sim < hardest_neg + eps)
    neg_mask = neg & (sim > easiest_pos - eps)
    # rows lacking the opposite pair type fall back to unmined sets
    no_neg, no_pos = ~neg.any(1), ~pos.any(1)
    pos_mask[no_neg] = pos[no_neg]
    neg_mask[no_pos] = neg[no_pos]
    return pos_mask, neg_mask


def multisimilarity_rows(D_rows, labels, block_weights, alpha: float = 2.0, beta: float = 40.0,
                         lam: float = 0.5, eps: float = 0.1):
    """Multi-similarity loss over K stacked (B x B) similarity blocks.

    ``D_rows`` has shape (K*B, B); block k holds one embedding space's matrix.
    Returns ``(sum_k w_k * loss_k, [loss_k])`` where loss_k averages over the
    active anchors of block k.
    """
    D_rows = dc.as_node(D_rows)
    labels = np.asarray(labels)
    n = labels.shape[0]
    k = len(block_weights)
    if D_rows.shape != (k * n, n):
        raise dc.ShapeError("multisimilarity_loss", D_rows.shape, (k * n, n))
    same = labels[:, None] == labels[None, :]
    pos = np.tile(same & ~np.eye(n, dtype=bool), (k, 1))
    neg = np.tile(~same, (k, 1))
    if not np.any(pos[:n].any(1) & neg[:n].any(1)):
        warnings.warn("multisimilarity_loss: no anchor has both a positive and a negative",
                      EmptyTupleWarning, stacklevel=3)
    pos_mask, neg_mask = _mine(D_rows.value, pos, neg, eps)
    active = (pos_mask.any(1) | neg_mask.any(1)).reshape(k, n)
    counts = active.sum(1)
    if not counts.any():
        return Node(0.0), [0.0] * k
    row_w = np.where(active, (np.asarray(block_weights, float) / np.maximum(counts, 1))[:, None],
                     0.0).reshape(-1)

    # exponent -alpha (D - lam) on positives, beta (D - lam) on negatives
    scale = np.where(pos_mask, -alpha, np.where(neg_mask, beta, 0.0))
    e = dc.exp(dc.affine(D_rows, scale, -scale * lam))
    s_pos = dc.sum(e * pos_mask.astype(np.float64), axis=1)
    s_neg = dc.sum(e * neg_mask.astype(np.float64), axis=1)
    per_row = (dc.log(dc.affine(s_pos, 1.0, 1.0)) * (1.0 / alpha)
               + dc.log(dc.affine(s_neg, 1.0, 1.0)) * (1.0 / beta))
    per_block = per_row.value.reshape(k, n)
    block_losses = [float(per_block[b][active[b]].sum() / counts[b]) if counts[b] else 0.0
                    for b in range(k)]
    return dc.sum(per_row * row_w), block_losses


def multisimilarity_loss(D, labels, alpha: float = 2.0, beta: float = 40.0,
                         lam: float = 0.5, eps: float = 0.1) -> Node:
    """Multi-similarity loss with hard pair mining, averaged over active anchors.

    Anchors without negatives keep all positives (and vice versa); an anchor is
    active if any mined pair survives.
    """
    D = dc.as_node(D)
    n = np.asarray(labels).shape[0]
    if D.shape != (n, n):
        raise dc.ShapeError("multisimilarity_loss", D.shape, (n, n))
    return multisimilarity_rows(D, labels, [1.0], alpha, beta, lam, eps)[0]


class BalancedSampler:
    """Class-balanced batches from a fixed label pool (index lists precomputed)."""

    def __init__(self, labels_pool):
        labels_pool = np.asarray(labels_pool)
        self.classes, self.counts = np.unique(labels_pool, return_counts=True)
        self.members = {c: np.flatnonzero(labels_pool == c) for c in self.classes}

    def sample(self, n_classes_per_batch: int, n_per_class: int,
               rng: np.random.Generator) -> np.ndarray:
        eligible = self.classes[self.counts >= n_per_class]
        if len(eligible) < n_classes_per_batch:
            raise ValueError(f"pool has {len(eligible)} classes with >= {n_per_class} samples, "
                             f"need {n_classes_per_batch}")
        chosen = rng.choice(eligible, size=n_classes_per_batch, replace=False)
        return np.concatenate([rng.choice(self.members[c], size=n_per_class, replace=False)
                               for c in chosen])


def class_balanced_batch(labels_pool, n_classes_per_batch: int, n_per_class: int,
                         rng: np.random.Generator) -> np.ndarray:
    return BalancedSampler(labels_pool).sample(n_classes_per_batch, n_per_class, rng)


def negative_weights(distances, d_embed: int, lambda_clip: float = 1e-3) -> np.ndarray:
    """Unnormalized inverse-density weights for negatives on the unit sphere.

    Distances are floored at 0.5 and weights above 1.4 are zeroed. Weights are
    scaled so the largest is 1, then floored at ``lambda_clip``.
    """
    d = np.maximum(np.asarray(distances, dtype=np.float64), LOWER_CUTOFF)
    n = d_embed
    log_q = (n - 2.0) * np.log(d) + 0.5 * (n - 3.0) * np.log(np.maximum(1.0 - 0.25 * d * d, 1e-8))
    log_w = -log_q
    w = np.exp(log_w - log_w.max())
    w = np.maximum(w, lambda_clip)
    return np.where(d < UPPER_CUTOFF, w, 0.0)


def distance_weighted_negative(distances, labels, anchor: int, d_embed: int,
                               lambda_clip: float, rng: np.random.Generator) -> int:
    """Sample one negative for ``anchor`` with probability ∝ clipped 1/q(d)."""
    labels = np.asarray(labels)
    negs = np.flatnonzero(labels != labels[anchor])
    if negs.size == 0:
        raise ValueError(f"anchor {anchor} has no negatives in the batch")
    w = negative_weights(np.asarray(distances)[negs], d_embed, lambda_clip)
    if w.sum() <= 0:
        w = np.ones_like(w)
    return int(negs[rng.choice(negs.size, p=w / w.sum())])


def sample_tuples(e, labels, rng: np.random.Generator, lambda_clip: float = 1e-3) -> BatchTuples:
    """All anchor-positive pairs, one distance-weighted negative each."""
    labels = np.asarray(labels)
    x = _emb(e)
    dist = pairwise_euclidean(x)
    d_embed = x.shape[1]
    a_idx, p_idx, n_idx = [], [], []
    for a in range(labels.shape[0]):
        if not np.any(labels != labels[a]):
            continue
        for p in np.flatnonzero(labels == labels[a]):
            if p == a:
                continue
            a_idx.append(a)
            p_idx.append(p)
            n_idx.append(distance_weighted_negative(dist[a], labels, a, d_embed, lambda_clip, rng))
    return BatchTuples(np.array(a_idx, dtype=np.int64), np.array(p_idx, dtype=np.int64),
                       np.array(n_idx, dtype=np.int64))


class DMLObjective:
    """Callable ``(embedding batch, labels) -> loss node`` with optional trainable state."""

    def __call__(self, e, labels) -> Node:
        raise NotImplementedError

    def parameters(self) -> list[np.ndarray]:
        return []


class MultiSimilarity(DMLObjective):
    def __init__(self, alpha=2.0, beta=40.0, lam=0.5, eps=0.1):
        self.alpha, self.beta, self.lam, self.eps = alpha, beta, lam, eps

    def __call__(self, e, labels) -> Node:
        return multisimilarity_loss(pairwise_cosine(e), labels, self.alpha, self.beta,
                                    self.lam, self.eps)


class Triplet(DMLObjective):
    def __init__(self, rng: np.random.Generator, m=0.2, lambda_clip=1e-3):
        self.rng, self.m, self.lambda_clip = rng, m, lambda_clip

    def __call__(self, e, labels) -> Node:
        return triplet_loss(e, sample_tuples(e, labels, self.rng, self.lambda_clip), self.m)


class Margin(DMLObjective):
    """Margin loss with distance-weighted sampling; ``beta_node`` is set by the trainer."""

    def __init__(self, rng: np.random.Generator, state: MarginState, lambda_clip=1e-3):
        self.rng, self.state, self.lambda_clip = rng, state, lambda_clip
        self.beta_node = None

    def __call__(self, e, labels) -> Node:
        tuples = sample_tuples(e, labels, self.rng, self.lambda_clip)
        return margin_loss(e, tuples, self.state, labels, self.beta_node)

    def parameters(self) -> list[np.ndarray]:
        return [self.state.beta]
