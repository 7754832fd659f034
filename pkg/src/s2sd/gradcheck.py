"""Reverse-mode gradients of every objective against central finite differences.

Each case builds a seeded batch, a base head and target heads, and compares
``value_and_grad`` with ``finite_difference_grad`` over all parameters.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .distill import (DistillConfig, distill_variant, dsd_loss, kl_rowwise, msd_loss,
                      msdf_loss, nested_loss, chained_loss, stacked_msd, nested_pairs,
                      chained_pairs)
from .heads import HeadParams, embed, init_head, normalize_features, project
from .losses import (MarginState, multisimilarity_loss, pairwise_cosine, sample_tuples,
                     margin_loss, triplet_loss, MultiSimilarity)

VARIANTS = ("rowwise_kl", "full_kl", "rowmean_kl", "cosine_match", "euclidean_match")
TARGET_DIMS = (5, 6, 8)
BASE_DIM = 3
IN_DIM = 6
HIDDEN = 6


@dataclass
class CaseResult:
    name: str
    seed: int
    batch_size: int
    rel_error: float


def _batch(seed: int, batch_size: int):
    rng = np.random.Generator(np.random.Philox(1000 + seed))
    n_classes = batch_size // 2
    labels = np.repeat(np.arange(n_classes), 2)
    x = rng.standard_normal((batch_size, IN_DIM)) + labels[:, None] * 0.3
    return x, labels, rng


def _heads(seed: int) -> list[HeadParams]:
    heads = [init_head(IN_DIM, BASE_DIM, 1, seed=seed, branch_id="base")]
    for k, d in enumerate(TARGET_DIMS):
        heads.append(init_head(IN_DIM, d, 2, hidden_dim=HIDDEN, seed=seed * 31 + k + 1,
                               branch_id=f"target{d}"))
    # nonzero biases so no row can collapse to the origin
    rng = np.random.Generator(np.random.Philox(seed))
    return [h.rebind([a if a.ndim == 2 else rng.uniform(0.1, 0.3, a.shape) for a in h.arrays()])
            for h in heads]


def _flat(heads):
    return [a for h in heads for a in h.arrays()]


def _rebind(heads, nodes):
    out, pos = [], 0
    for h in heads:
        n = len(h.arrays())
        if pos + n > len(nodes):
            break
        out.append(h.rebind(nodes[pos:pos + n]))
        pos += n
    return out


def cases(seed: int, batch_size: int) -> dict[str, tuple[Callable, list]]:
    """Name -> (loss over parameter nodes, parameter arrays)."""
    x, labels, rng = _batch(seed, batch_size)
    heads = _heads(seed)
    ms = MultiSimilarity()
    cfg = DistillConfig(gamma=3.0, temperature=1.0, target_dims=list(TARGET_DIMS), warmup_n=0)
    feat = normalize_features(x)
    out = {}

    base_only = heads[:1]
    e0 = embed(x, heads[0])
    tuples = sample_tuples(e0, labels, rng)
    margin = MarginState.create(0.6, 0.2)

    def spaces(nodes, k=len(heads)):
        hs = _rebind(heads[:k], nodes)
        return [embed(x, h) for h in hs]

    out["triplet"] = (lambda *n: triplet_loss(spaces(n, 1)[0], tuples, 0.2), _flat(base_only))
    out["margin"] = (lambda *n: margin_loss(spaces(n[:-1], 1)[0], tuples, margin, labels, n[-1]),
                     _flat(base_only) + [margin.beta])
    out["multisimilarity"] = (
        lambda *n: multisimilarity_loss(pairwise_cosine(spaces(n, 1)[0]), labels),
        _flat(base_only))
    pair = heads[:2]
    out["kl_rowwise"] = (
        lambda *n: kl_rowwise(*[pairwise_cosine(e) for e in spaces(n, 2)], cfg.temperature),
        _flat(pair))
    for v in VARIANTS:
        out[f"variant/{v}"] = (
            lambda *n, v=v: distill_variant(*[pairwise_cosine(e) for e in spaces(n, 2)],
                                            cfg.temperature, v),
            _flat(pair))
    out["dsd"] = (lambda *n: dsd_loss(*spaces(n, 2), labels, ms, cfg).total, _flat(pair))
    out["msd"] = (lambda *n: msd_loss(spaces(n)[0], spaces(n)[1:], labels, ms, cfg).total,
                  _flat(heads))
    out["msdf"] = (lambda *n: msdf_loss(spaces(n)[0], spaces(n)[1:], feat, labels, ms, cfg,
                                        step=1).total, _flat(heads))
    out["nested"] = (lambda *n: nested_loss(spaces(n), labels, ms, cfg).total, _flat(heads))
    out["chained"] = (lambda *n: chained_loss(spaces(n), labels, ms, cfg).total, _flat(heads))
    dims = [BASE_DIM, *TARGET_DIMS]

    def stacked(*n):
        hs = _rebind(heads, n)
        raw = dc.concatenate([project(x, h) for h in hs], axis=1)
        return stacked_msd(raw, dims, labels, ms, cfg).total

    out["msd_stacked"] = (stacked, _flat(heads))
    return out


def check_case(fn: Callable, params: list, h: float = 1e-4) -> float:
    _, grads = dc.value_and_grad(fn, params)
    fd = dc.finite_difference_grad(fn, params, h=h)
    return max(dc.relative_error(g, f) for g, f in zip(grads, fd))


def run_suite(seeds=range(5), batch_sizes=(8, 12, 16, 10, 14), h: float = 1e-4,
              names=None) -> list[CaseResult]:
    results = []
    for seed, b in zip(seeds, batch_sizes):
        for name, (fn, params) in cases(seed, b).items():
            if names is None or name in names:
                results.append(CaseResult(name, seed, b, check_case(fn, params, h)))
    return results


@dataclass
class StopResult:
    name: str
    seed: int
    max_abs_teacher_grad: float
    max_abs_student_grad: float


def _distill_only(build, cfg):
    """Distillation part of a composite: total at ``cfg.gamma`` minus total at zero."""
    zero = DistillConfig(**{**cfg.__dict__, "gamma": 0.0})
    return lambda *n: build(cfg, *n) - build(zero, *n)


def stop_cases(seed: int, batch_size: int) -> dict[str, tuple[Callable, list, list[bool]]]:
    """Name -> (distillation-only loss, parameters, teacher mask over parameters)."""
    x, labels, _ = _batch(seed, batch_size)
    heads = _heads(seed)
    ms = MultiSimilarity()
    cfg = DistillConfig(gamma=3.0, temperature=1.0, target_dims=list(TARGET_DIMS), warmup_n=0)
    feat = normalize_features(x)
    sizes = [len(h.arrays()) for h in heads]

    def mask(teachers):
        return [k in teachers for k, n in enumerate(sizes) for _ in range(n)]

    def mats(nodes):
        return [pairwise_cosine(embed(x, h)) for h in _rebind(heads, nodes)]

    out = {}
    for v in VARIANTS:
        for name, pairs in (("nested", nested_pairs(len(heads))),
                            ("chained", chained_pairs(len(heads)))):
            for i, j in pairs:
                out[f"{v}/{name}/{i}<-{j}"] = (
                    lambda *n, i=i, j=j, v=v: distill_variant(*[mats(n)[k] for k in (i, j)],
                                                              cfg.temperature, v),
                    _flat(heads), mask({j}))

    def spaces(nodes):
        return [embed(x, h) for h in _rebind(heads, nodes)]

    topo = {
        "dsd": lambda c, *n: dsd_loss(*spaces(n)[:2], labels, ms, c).total,
        "msd": lambda c, *n: msd_loss(spaces(n)[0], spaces(n)[1:], labels, ms, c).total,
        "msdf": lambda c, *n: msdf_loss(spaces(n)[0], spaces(n)[1:], feat, labels, ms, c,
                                        step=1).total,
        "nested": lambda c, *n: nested_loss(spaces(n), labels, ms, c).total,
        "chained": lambda c, *n: chained_loss(spaces(n), labels, ms, c).total,
    }
    teachers = {"dsd": {1}, "msd": {1, 2, 3}, "msdf": {1, 2, 3}, "nested": {3}, "chained": {3}}
    for name, build in topo.items():
        params = _flat(heads[:2]) if name == "dsd" else _flat(heads)
        m = mask(teachers[name])[:len(params)]
        out[f"composite/{name}"] = (_distill_only(build, cfg), params, m)
    dims = [BASE_DIM, *TARGET_DIMS]

    def stacked(c, *n):
        raw = dc.concatenate([project(x, h) for h in _rebind(heads, n)], axis=1)
        return stacked_msd(raw, dims, labels, ms, c).total

    out["composite/msd_stacked"] = (_distill_only(stacked, cfg), _flat(heads), mask({1, 2, 3}))
    return out


def run_stop_suite(seeds=range(5), batch_sizes=(8, 12, 16, 10, 14)) -> list[StopResult]:
    results = []
    for seed, b in zip(seeds, batch_sizes):
        for name, (fn, params, is_teacher) in stop_cases(seed, b).items():
            _, grads = dc.value_and_grad(fn, params)
            t = [np.abs(g).max() for g, flag in zip(grads, is_teacher) if flag]
            s = [np.abs(g).max() for g, flag in zip(grads, is_teacher) if not flag]
            results.append(StopResult(name, seed, float(max(t)), float(max(s, default=0.0))))
    return results
