"""Similarity-based self-distillation: the row-wise KL kernel and the composite objectives.

Every distillation term puts its teacher matrix behind ``stop_gradient`` so
only the lower-dimensional (student) side receives gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import builtins
from math import comb
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node
from .heads import EmbeddingBatch
from .losses import pairwise_cosine

TOPOLOGIES = ("dual", "multi", "nested", "chained")
VARIANTS = ("rowwise_kl", "full_kl", "rowmean_kl", "cosine_match", "euclidean_match")


@dataclass
class DistillConfig:
    gamma: float = 50.0
    temperature: float = 1.0
    topology: str = "multi"
    target_dims: list = field(default_factory=lambda: [512, 1024, 1536, 2048])
    feature_distill: bool = False
    warmup_n: int = 1000
    pooling: str = "avg"
    variant: str = "rowwise_kl"

    def validate(self, base_dim: int | None = None) -> None:
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown distillation variant {self.variant!r}")
        if self.pooling not in ("avg", "avg_plus_max"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.warmup_n < 0:
            raise ValueError("warmup_n must be >= 0")
        check_ascending([base_dim] + list(self.target_dims) if base_dim else self.target_dims)


@dataclass
class Objective:
    """Total loss node plus the value of each term for logging."""

    total: Node
    terms: dict = field(default_factory=dict)


DMLFn = Callable[[EmbeddingBatch, np.ndarray], Node]


def check_ascending(dims: Sequence[int]) -> None:
    dims = list(dims)
    if any(b <= a for a, b in zip(dims[:-1], dims[1:])):
        raise ValueError(f"embedding dims must be strictly ascending, got {dims}")


def _matrix(x) -> Node:
    if isinstance(x, EmbeddingBatch):
        return pairwise_cosine(x)
    return dc.as_node(x)


def row_softmax(D, T: float = 1.0) -> Node:
    if T <= 0:
        raise ValueError(f"temperature must be positive, got {T}")
    return dc.softmax_rows(_matrix(D), T)


def _kl_rows(student_logits: Node, teacher_logits: Node, T: float,
             row_weights: np.ndarray | None = None) -> Node:
    # sum_i w_i sum_j p_ij (log p_ij - log q_ij), student p, detached teacher q
    log_p = dc.log_softmax_rows(student_logits, T)
    log_q = dc.log_softmax_rows(dc.stop_gradient(teacher_logits), T)
    p = dc.softmax_rows(student_logits, T)
    if row_weights is None:
        return dc.sum(p * (log_p - log_q))
    return dc.sum(p * (log_p - log_q) * np.broadcast_to(row_weights[:, None], p.shape))


def kl_rowwise(D_student, D_teacher, T: float = 1.0) -> Node:
    s, t = _matrix(D_student), _matrix(D_teacher)
    if s.shape != t.shape:
        raise dc.ShapeError("kl_rowwise", s.shape, t.shape)
    return _kl_rows(s, t, T)


def distill_variant(D_student, D_teacher, T: float = 1.0, variant: str = "rowwise_kl") -> Node:
    s, t = _matrix(D_student), _matrix(D_teacher)
    if s.shape != t.shape:
        raise dc.ShapeError("distill_variant", s.shape, t.shape)
    if variant == "rowwise_kl":
        return _kl_rows(s, t, T)
    if variant == "full_kl":
        n = s.value.size
        return _kl_rows(dc.reshape(s, (1, n)), dc.reshape(t, (1, n)), T)
    if variant == "rowmean_kl":
        b = s.shape[0]
        return _kl_rows(dc.reshape(dc.mean(s, axis=1), (1, b)),
                        dc.reshape(dc.mean(t, axis=1), (1, b)), T)
    t = dc.stop_gradient(t)
    if variant == "cosine_match":
        dot = dc.sum(s * t)
        norms = dc.sqrt(dc.sum(s * s)) * dc.sqrt(dc.sum(t * t))
        return 1.0 - dot / norms
    if variant == "euclidean_match":
        diff = s - t
        return dc.sum(diff * diff) * (1.0 / s.value.size)
    raise ValueError(f"unknown distillation variant {variant!r}")


def _as_list(dml, n: int) -> list:
    if callable(dml):
        return [dml] * n
    dml = list(dml)
    if len(dml) != n:
        raise ValueError(f"expected {n} per-branch objectives, got {len(dml)}")
    return dml


def _dml_bracket(spaces: Sequence[EmbeddingBatch], labels, dml) -> tuple[Node, dict]:
    # 1/2 [L(f) + 1/m sum_k L(g_k)]
    fns = _as_list(dml, len(spaces))
    losses = [fn(e, labels) for fn, e in zip(fns, spaces)]
    m = len(spaces) - 1
    target_sum = losses[1]
    for term in losses[2:]:
        target_sum = target_sum + term
    bracket = 0.5 * (losses[0] + target_sum * (1.0 / m))
    terms = {f"dml/{e.branch_id}": float(l.value) for e, l in zip(spaces, losses)}
    return bracket, terms


def _pair_term(student, teacher, cfg: DistillConfig) -> Node:
    return distill_variant(student, teacher, cfg.temperature, cfg.variant)


def _composite(spaces, labels, dml, cfg, pairs, norm) -> Objective:
    if len(spaces) < 2:
        raise ValueError("need the base space and at least one target space")
    check_ascending([e.dim for e in spaces])
    bracket, terms = _dml_bracket(spaces, labels, dml)
    mats = [pairwise_cosine(e) for e in spaces]
    dist = None
    for i, j in pairs:
        term = _pair_term(mats[i], mats[j], cfg)
        terms[f"dist/{spaces[i].branch_id}<-{spaces[j].branch_id}"] = float(term.value)
        dist = term if dist is None else dist + term
    dist_total = dist * (cfg.gamma / norm)
    terms["dist"] = float(dist_total.value)
    terms["dml"] = float(bracket.value)
    return Objective(bracket + dist_total, terms)


def dsd_loss(base: EmbeddingBatch, target: EmbeddingBatch, labels, dml,
             cfg: DistillConfig) -> Objective:
    """1/2 [L(f) + L(g)] + gamma * L_dist(D_f, D_g)."""
    return _composite([base, target], labels, dml, cfg, [(0, 1)], 1)


def msd_loss(base: EmbeddingBatch, targets: Sequence[EmbeddingBatch], labels, dml,
             cfg: DistillConfig) -> Objective:
    """1/2 [L(f) + 1/m sum L(g_k)] + gamma/m sum L_dist(D_f, D_gk)."""
    m = len(targets)
    if m == 0:
        raise ValueError("msd_loss needs at least one target space")
    return _composite([base, *targets], labels, dml, cfg, [(0, k) for k in range(1, m + 1)], m)


def nested_pairs(n_spaces: int) -> list[tuple[int, int]]:
    """(student, teacher) pairs: every space distilled from every higher-dim one."""
    return [(i, j) for i in range(n_spaces) for j in range(1, n_spaces) if j > i]


def chained_pairs(n_spaces: int) -> list[tuple[int, int]]:
    return [(i, i + 1) for i in range(n_spaces - 1)]


def nested_loss(spaces: Sequence[EmbeddingBatch], labels, dml, cfg: DistillConfig) -> Objective:
    m = len(spaces) - 1
    # printed normalizer binom(m, m-1) = m, not the pair count
    return _composite(spaces, labels, dml, cfg, nested_pairs(len(spaces)), comb(m, m - 1))


def chained_loss(spaces: Sequence[EmbeddingBatch], labels, dml, cfg: DistillConfig) -> Objective:
    m = len(spaces) - 1
    return _composite(spaces, labels, dml, cfg, chained_pairs(len(spaces)), m)


def feature_term(base: EmbeddingBatch, feat: EmbeddingBatch, cfg: DistillConfig) -> Node:
    return _pair_term(pairwise_cosine(base), pairwise_cosine(feat), cfg)


def msdf_loss(base: EmbeddingBatch, targets: Sequence[EmbeddingBatch], feat: EmbeddingBatch,
              labels, dml, cfg: DistillConfig, step: int) -> Objective:
    """MSD plus gamma * L_dist(D_f, D_features) once ``step >= warmup_n``."""
    obj = msd_loss(base, targets, labels, dml, cfg)
    return _add_feature_term(obj, base, feat, cfg, step)


def _add_feature_term(obj: Objective, base, feat, cfg, step) -> Objective:
    if feat is None or step < cfg.warmup_n:
        obj.terms["dist/features"] = 0.0
        return obj
    term = feature_term(base, feat, cfg) * cfg.gamma
    obj.terms["dist/features"] = float(term.value)
    return Objective(obj.total + term, obj.terms)


def s2sd_objective(base: EmbeddingBatch, targets: Sequence[EmbeddingBatch], labels, dml,
                   cfg: DistillConfig, feat: EmbeddingBatch | None = None,
                   step: int = 0) -> Objective:
    """Dispatch on ``cfg.topology``; adds the feature term when ``cfg.feature_distill``."""
    if cfg.topology == "dual":
        if len(targets) != 1:
            raise ValueError("dual topology takes exactly one target space")
        obj = dsd_loss(base, targets[0], labels, dml, cfg)
    elif cfg.topology == "multi":
        obj = msd_loss(base, targets, labels, dml, cfg)
    elif cfg.topology == "nested":
        obj = nested_loss([base, *targets], labels, dml, cfg)
    elif cfg.topology == "chained":
        obj = chained_loss([base, *targets], labels, dml, cfg)
    else:
        raise ValueError(f"unknown topology {cfg.topology!r}")
    if cfg.feature_distill:
        obj = _add_feature_term(obj, base, feat, cfg, step)
    return obj


# -- stacked fast path ----------------------------------------------------------
#
# All embedding spaces share one (K*B, B) similarity matrix so the multi-scale
# objective costs a constant number of graph nodes regardless of K.

def stacked_cosine(raw, dims: Sequence[int]) -> Node:
    """Per-space cosine matrices of the column blocks of ``raw`` stacked row-wise.

    ``raw`` is (B, sum(dims)) un-normalized head output; block k of the result
    equals ``pairwise_cosine(l2_normalize(raw[:, block_k]))``.
    """
    raw = dc.as_node(raw)
    if sum(dims) != raw.shape[1]:
        raise dc.ShapeError("stacked_cosine", raw.shape, tuple(dims))
    return dc.block_cosine(raw, dims)


def stacked_msd(raw, dims: Sequence[int], labels, ms, cfg: DistillConfig,
                feat_sim: np.ndarray | None = None, step: int = 0,
                branch_ids: Sequence[str] | None = None) -> Objective:
    """MSD (DSD for one target) with multi-similarity L_DML on stacked spaces.

    Matches ``s2sd_objective`` for the multi/dual topologies with the row-wise
    KL kernel. ``dims[0]`` is the base space; ``feat_sim`` is the fixed cosine
    matrix of normalized features, distilled once ``step >= warmup_n``.
    With a single space this is the plain multi-similarity baseline.
    """
    from .losses import multisimilarity_rows

    labels = np.asarray(labels)
    n, k = labels.shape[0], len(dims)
    m = k - 1
    branch_ids = list(branch_ids or ["base"] + [f"target{d}" for d in dims[1:]])
    D = stacked_cosine(raw, dims)
    weights = [1.0] if m == 0 else [0.5] + [0.5 / m] * m
    dml, block_losses = multisimilarity_rows(D, labels, weights, ms.alpha, ms.beta,
                                             ms.lam, ms.eps)
    terms = {f"dml/{bid}": v for bid, v in zip(branch_ids, block_losses)}
    terms["dml"] = float(dml.value)
    if m == 0:
        terms["dist"] = 0.0
        return Objective(dml, terms)
    if cfg.topology not in ("dual", "multi") or cfg.variant != "rowwise_kl":
        raise ValueError("stacked path supports the dual/multi topologies with rowwise_kl only")
    check_ascending(dims)

    use_feat = cfg.feature_distill and feat_sim is not None and step >= cfg.warmup_n
    # teachers are constants, so sum_k w_k KL(p || q_k) = W sum p log p - sum p * Q
    # with W = sum_k w_k and Q = sum_k w_k log q_k
    log_all = _log_softmax(dc.stop_gradient(D).value, cfg.temperature)
    lpv = log_all[:n]
    log_q = [log_all[i * n:(i + 1) * n] for i in range(1, k)]
    weights = [cfg.gamma / m] * m
    if use_feat:
        log_q.append(_log_softmax(np.asarray(feat_sim), cfg.temperature))
        weights.append(cfg.gamma)
    total_w = float(np.sum(weights))
    Q = builtins.sum(w * lq for w, lq in zip(weights, log_q))
    dist = dc.cross_kl_rows(dc.take(D, slice(0, n)), Q, total_w, cfg.temperature)

    pv = np.exp(lpv)
    for i, bid in enumerate(branch_ids[1:]):
        terms[f"dist/base<-{bid}"] = float((pv * (lpv - log_q[i])).sum())
    if cfg.feature_distill:
        terms["dist/features"] = (float(cfg.gamma * (pv * (lpv - log_q[m])).sum())
                                  if use_feat else 0.0)
    terms["dist"] = float(dist.value) - terms.get("dist/features", 0.0)
    return Objective(dml + dist, terms)


def _log_softmax(x: np.ndarray, T: float) -> np.ndarray:
    z = x / T
    z = z - z.max(1, keepdims=True)
    return z - np.log(np.exp(z).sum(1, keepdims=True))
