"""Adam, the training loop for baseline / S2SD / two-stage runs, and checkpoint evaluation."""
from __future__ import annotations

import csv
import json
import logging
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import ConfigError, RunConfig, to_dict
from .data import generate_synthetic, load_features
from .distill import distill_variant, s2sd_objective, stacked_msd
from .evaluation import MetricsRecord, evaluate_embeddings
from .heads import (FeatureBatch, HeadParams, TargetBank, embed, init_head, load_checkpoint,
                    normalize_features, pool, project, save_checkpoint)
from .losses import (BalancedSampler, Margin, MarginState, MultiSimilarity, Triplet,
                     pairwise_cosine)

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    pass


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_update_(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """In-place Adam: ``params`` and ``state`` are overwritten, ``grads`` used as scratch."""
    state.t += 1
    c1, c2 = 1 - beta1 ** state.t, 1 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            g += weight_decay * p
        m *= beta1
        m += (1 - beta1) * g
        np.multiply(g, g, out=g)
        v *= beta2
        g *= 1 - beta2
        v += g
        np.multiply(v, 1 / c2, out=g)
        np.sqrt(g, out=g)
        g += eps
        np.divide(m, g, out=g)
        g *= lr / c1
        p -= g


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
    """Bias-corrected Adam; weight decay enters as an L2 term on the gradient.

    Returns fresh parameter arrays and a new state; inputs are not modified.
    """
    new = [np.array(p, dtype=np.float64) for p in params]
    st = AdamState([m.copy() for m in state.m], [v.copy() for v in state.v], state.t)
    adam_update_(new, [np.array(g, dtype=np.float64) for g in grads], st, lr, beta1, beta2,
                 eps, weight_decay)
    return new, st


@dataclass
class TrainReport:
    metrics: list = field(default_factory=list)
    checkpoint_path: str | None = None
    loss_terms: list = field(default_factory=list)
    step_times: list = field(default_factory=list)
    overhead_ratio: float | None = None
    heads: dict = field(default_factory=dict)

    @property
    def mean_step_time(self) -> float:
        return float(np.mean(self.step_times)) if self.step_times else 0.0

    @property
    def final(self) -> MetricsRecord:
        return self.metrics[-1]


def load_data(cfg: RunConfig) -> tuple[FeatureBatch, FeatureBatch]:
    if cfg.train_features:
        return load_features(cfg.train_features), load_features(cfg.test_features)
    return generate_synthetic(cfg.synthetic_spec())


def _make_dml(cfg: RunConfig, rng: np.random.Generator, n_classes: int):
    if cfg.dml_loss == "multisimilarity":
        return MultiSimilarity(cfg.ms_alpha, cfg.ms_beta, cfg.ms_lambda, cfg.ms_eps)
    if cfg.dml_loss == "triplet":
        return Triplet(rng, cfg.triplet_m, cfg.lambda_clip)
    state = MarginState.create(cfg.margin_beta0, cfg.margin_m,
                               n_classes if cfg.margin_per_class else None)
    return Margin(rng, state, cfg.lambda_clip)


def embed_numpy(pooled: np.ndarray, head: HeadParams) -> np.ndarray:
    return embed(pooled, head).value


def evaluate_head(head: HeadParams, test: FeatureBatch, seed: int, step: int,
                  split: str = "test") -> MetricsRecord:
    """Base-head evaluation with average pooling, the only test-time architecture."""
    return evaluate_embeddings(embed_numpy(pool(test, "avg"), head), test.labels,
                               seed=seed, step=step, split=split)


class _Run:
    """Holds the mutable state of one training run."""

    def __init__(self, cfg: RunConfig, train_set: FeatureBatch, teacher: HeadParams | None):
        self.cfg = cfg
        self.dcfg = cfg.distill_config()
        seeds = np.random.SeedSequence(cfg.seed).spawn(2)
        self.batch_rng = np.random.Generator(np.random.Philox(seeds[0]))
        self.sample_rng = np.random.Generator(np.random.Philox(seeds[1]))
        self.train = train_set
        self.pooled_avg = pool(train_set, "avg")
        self.pooled_aux = (pool(train_set, "avg_plus_max") if self.dcfg.pooling == "avg_plus_max"
                           else self.pooled_avg)
        n_labels = int(train_set.labels.max()) + 1
        c = train_set.channels

        heads = [init_head(c, cfg.base_dim, cfg.base_depth, cfg.base_dim, seed=cfg.seed,
                           branch_id="base")]
        if cfg.mode == "s2sd":
            hidden = cfg.target_hidden or max(cfg.target_dims)
            for k, dim in enumerate(cfg.target_dims):
                heads.append(init_head(self.pooled_aux.shape[1], dim, cfg.target_depth,
                                       hidden, seed=cfg.seed * 1009 + k + 1,
                                       branch_id=f"target{dim}"))
        self.branch_ids = [h.branch_id for h in heads]
        self.dims = [h.out_dim for h in heads]
        self.teacher = teacher
        self.dmls = [_make_dml(cfg, self.sample_rng, n_labels) for _ in heads]
        # shared-matrix fast path; other objectives build one graph per space
        self.stacked = (cfg.dml_loss == "multisimilarity" and cfg.mode != "two_stage_student"
                        and (cfg.mode != "s2sd" or (self.dcfg.topology in ("dual", "multi")
                                                    and self.dcfg.variant == "rowwise_kl")))
        # parameter groups: the base head, then either one bank or one head per target
        if self.stacked and len(heads) > 1:
            self.groups = [heads[0], TargetBank(heads[1:])]
        else:
            self.groups = heads
        arrays = [a for g in self.groups for a in g.arrays()]
        self.aux_params = [p for d in self.dmls for p in d.parameters()]
        self.shapes = [p.shape for p in arrays]
        # head tensors are views into one flat buffer that Adam updates in place
        self.flat_heads = np.concatenate([p.ravel() for p in arrays])
        self.flat_grad = np.zeros_like(self.flat_heads)
        self.head_params = self._unflatten(self.flat_heads)
        self.grad_views = self._unflatten(self.flat_grad)
        self.groups = self._bind_arrays()
        self.head_state = AdamState.zeros_like([self.flat_heads])
        self.aux_state = AdamState.zeros_like(self.aux_params)
        self.step = 0
        self.feat_sim = None
        if cfg.mode == "s2sd" and self.dcfg.feature_distill:
            fn = normalize_features(self.pooled_aux).value
            self.feat_sim = fn @ fn.T
        self.sampler = BalancedSampler(train_set.labels)

    @property
    def heads(self) -> list[HeadParams]:
        out = []
        for g in self.groups:
            out += g.unpack() if isinstance(g, TargetBank) else [g.copy()]
        return out

    def _bind(self, nodes):
        out, pos = [], 0
        for g in self.groups:
            n = len(g.arrays())
            out.append(g.rebind(nodes[pos:pos + n]))
            pos += n
        for d in self.dmls:
            if isinstance(d, Margin):
                d.beta_node = nodes[pos]
                pos += 1
        return out

    def objective(self, idx: np.ndarray, terms: dict):
        cfg = self.cfg
        labels = self.train.labels[idx]
        x_avg = self.pooled_avg[idx]
        x_aux = self.pooled_aux[idx]

        def loss(*nodes):
            heads = self._bind(nodes)
            if self.stacked and cfg.mode in ("baseline", "two_stage_teacher"):
                obj = stacked_msd(project(x_avg, heads[0]), self.dims, labels,
                                  self.dmls[0], self.dcfg)
                terms.update(obj.terms)
                return obj.total
            if self.stacked and cfg.mode == "s2sd":
                raw = dc.concatenate([project(x_avg, heads[0]), heads[1].project(x_aux)], axis=1)
                feat_sim = self.feat_sim[np.ix_(idx, idx)] if self.feat_sim is not None else None
                obj = stacked_msd(raw, self.dims, labels, self.dmls[0], self.dcfg, feat_sim,
                                  self.step, self.branch_ids)
                terms.update(obj.terms)
                return obj.total
            base = embed(x_avg, heads[0])
            if cfg.mode in ("baseline", "two_stage_teacher"):
                value = self.dmls[0](base, labels)
                terms.update({"dml/base": float(value.value), "dml": float(value.value), "dist": 0.0})
                return value
            if cfg.mode == "two_stage_student":
                dml = self.dmls[0](base, labels)
                teacher = embed(x_avg, self.teacher)
                dist = distill_variant(pairwise_cosine(base), pairwise_cosine(teacher),
                                       self.dcfg.temperature, self.dcfg.variant)
                dist = dist * self.dcfg.gamma
                terms.update({"dml/base": float(dml.value), "dml": 0.5 * float(dml.value),
                              "dist": float(dist.value)})
                return 0.5 * dml + dist
            targets = [embed(x_aux, h) for h in heads[1:]]
            feat = normalize_features(x_aux) if self.dcfg.feature_distill else None
            obj = s2sd_objective(base, targets, labels, self.dmls, self.dcfg, feat, self.step)
            terms.update(obj.terms)
            return obj.total

        return loss

    def train_step(self) -> tuple[float, dict]:
        cfg = self.cfg
        idx = self.sampler.sample(cfg.classes_per_batch, cfg.samples_per_batch_class,
                                  self.batch_rng)
        terms: dict = {}
        params = self.head_params + self.aux_params
        try:
            value, grads = dc.value_and_grad(self.objective(idx, terms), params)
        except dc.NonFiniteError as err:
            raise NumericalAbort(f"step {self.step}: non-finite value in {err.op} "
                                 f"(terms so far: {sorted(terms)})") from err
        bad = [k for k, v in terms.items() if not np.isfinite(v)]
        if bad or not np.isfinite(value):
            raise NumericalAbort(f"step {self.step}: non-finite loss term(s) {bad or ['total']}")
        nh = len(self.head_params)
        for view, g in zip(self.grad_views, grads[:nh]):
            view[...] = g
        adam_update_([self.flat_heads], [self.flat_grad], self.head_state, cfg.lr,
                     cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
        if self.aux_params:
            beta_lr = cfg.beta_lr if cfg.beta_lr is not None else cfg.lr
            self.aux_params, self.aux_state = adam_step(
                self.aux_params, grads[nh:], self.aux_state, beta_lr, cfg.adam_beta1,
                cfg.adam_beta2, cfg.adam_eps, 0.0)
            pos = 0
            for d in self.dmls:
                if isinstance(d, Margin):
                    d.state.beta = self.aux_params[pos]
                    d.state.clamp()
                    pos += 1
        self.step += 1
        terms["total"] = value
        return value, terms

    def _unflatten(self, flat: np.ndarray) -> list:
        out, pos = [], 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            out.append(flat[pos:pos + size].reshape(shape))
            pos += size
        return out

    def _bind_arrays(self):
        out, pos = [], 0
        for g in self.groups:
            n = len(g.arrays())
            out.append(g.rebind(self.head_params[pos:pos + n]))
            pos += n
        return out


def _write_outputs(out: Path, cfg: RunConfig, report: TrainReport, heads) -> None:
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.bin"
    save_checkpoint(heads, ckpt)
    report.checkpoint_path = str(ckpt)
    rows = [m.as_row() for m in report.metrics]
    if rows:
        with open(out / "summary.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    (out / "report.json").write_text(json.dumps({
        "config": to_dict(cfg),
        "checkpoint": report.checkpoint_path,
        "loss_terms": report.loss_terms,
        "step_times": report.step_times,
        "mean_step_time": report.mean_step_time,
        "overhead_ratio": report.overhead_ratio,
    }, indent=1))


def train(cfg: RunConfig, data: tuple[FeatureBatch, FeatureBatch] | None = None,
          baseline: TrainReport | None = None) -> TrainReport:
    """Run one configuration; ``data`` skips regeneration when the caller already has it.

    Passing the report of a comparable baseline run fills ``overhead_ratio``.
    """
    cfg.validate()
    train_set, test_set = data if data is not None else load_data(cfg)
    _, counts = np.unique(train_set.labels, return_counts=True)
    if (counts >= cfg.samples_per_batch_class).sum() < cfg.classes_per_batch:
        raise ConfigError("classes_per_batch",
                          f"training data has {(counts >= cfg.samples_per_batch_class).sum()} "
                          f"classes with >= {cfg.samples_per_batch_class} samples")
    teacher = None
    if cfg.mode == "two_stage_student":
        try:
            teacher = load_checkpoint(cfg.teacher_checkpoint)["base"]
        except (OSError, KeyError) as err:
            raise FileNotFoundError(f"teacher checkpoint {cfg.teacher_checkpoint}: {err}") from err
    run = _Run(cfg, train_set, teacher)
    report = TrainReport()
    out = Path(cfg.output_dir) if cfg.output_dir else None
    metrics_log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_log = open(out / "metrics.jsonl", "w")
    try:
        for step in range(1, cfg.iterations + 1):
            t0 = time.perf_counter()
            _, terms = run.train_step()
            report.step_times.append(time.perf_counter() - t0)
            report.loss_terms.append(terms)
            if step % cfg.eval_every == 0 or step == cfg.iterations:
                rec = evaluate_head(run.heads[0], test_set, cfg.seed, step)
                report.metrics.append(rec)
                log.info("step %d R@1 %.4f NMI %.4f", step, rec.recall_at[1], rec.nmi)
                if metrics_log:
                    metrics_log.write(json.dumps(rec.as_row()) + "\n")
                    metrics_log.flush()
    finally:
        if metrics_log:
            metrics_log.close()
    heads = run.heads
    report.heads = {h.branch_id: h for h in heads}
    if baseline is not None:
        report.overhead_ratio = overhead_ratio(report, baseline)
    if out is not None:
        _write_outputs(out, cfg, report, heads)
    return report


def overhead_ratio(report: TrainReport, baseline: TrainReport) -> float:
    """Median step time relative to the baseline's; medians shrug off scheduler hiccups."""
    if not report.step_times or not baseline.step_times:
        raise ValueError("both reports need recorded step times")
    return float(np.median(report.step_times) / np.median(baseline.step_times))


def train_two_stage(teacher_cfg: RunConfig, student_cfg: RunConfig,
                    data: tuple[FeatureBatch, FeatureBatch] | None = None
                    ) -> tuple[TrainReport, TrainReport]:
    """Stage 1 trains the teacher with pure L_DML; stage 2 distills into the student."""
    teacher_cfg = teacher_cfg.replace(mode="two_stage_teacher")
    with tempfile.TemporaryDirectory() as tmp:
        if teacher_cfg.output_dir is None:
            teacher_cfg = teacher_cfg.replace(output_dir=str(Path(tmp) / "teacher"))
        teacher_report = train(teacher_cfg, data)
        student_cfg = student_cfg.replace(mode="two_stage_student",
                                          teacher_checkpoint=teacher_report.checkpoint_path)
        student_report = train(student_cfg, data)
    return teacher_report, student_report


def evaluate(checkpoint, features: FeatureBatch, split: str = "test", seed: int = 0,
             step: int = 0) -> MetricsRecord:
    heads = load_checkpoint(checkpoint)
    head = heads["base"]
    if head.in_dim != features.channels:
        raise ValueError(f"checkpoint expects {head.in_dim} channels, features have "
                         f"{features.channels}")
    return evaluate_head(head, features, seed, step, split)
