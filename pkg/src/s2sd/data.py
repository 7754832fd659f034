"""Synthetic zero-shot datasets and the binary FeatureFile format.

Randomness comes from numpy's Philox counter-based bit generator, so a seed
yields the same dataset on every platform.

FeatureFile layout (little-endian throughout)::

    8 bytes   magic  b"S2SDFEAT"
    u32 x 5   version (=1), N, H, W, C
    f32       N*H*W*C feature values, row-major (N, H, W, C)
    u32       N labels
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .heads import FeatureBatch

MAGIC = b"S2SDFEAT"
VERSION = 1
_HEADER = struct.Struct("<8s5I")
MAX_LABEL = 2**31 - 1


class FeatureFileError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class SyntheticSpec:
    n_classes_train: int = 20
    n_classes_test: int = 20
    samples_per_class: int = 25
    feature_dim: int = 64
    spatial: int = 1
    prototype_scale: float = 1.0
    noise_sigma: float = 0.3
    intra_class_subspace_dim: int = 8
    subspace_scale: float = 3.0
    # one nuisance subspace shared by every class (train and test), or a fresh one per class
    shared_subspace: bool = True
    spatial_jitter: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes_train < 2 or self.n_classes_test < 2:
            raise ValueError("need at least 2 train and 2 test classes")
        if self.samples_per_class < 2 or self.feature_dim < 1 or self.spatial < 1:
            raise ValueError("samples_per_class >= 2, feature_dim >= 1, spatial >= 1 required")
        if self.noise_sigma <= 0 or self.prototype_scale <= 0:
            raise ValueError("noise_sigma and prototype_scale must be positive")
        if not 0 <= self.intra_class_subspace_dim <= self.feature_dim:
            raise ValueError("intra_class_subspace_dim must lie in [0, feature_dim]")

    def expected_separation_ratio(self) -> float:
        """Analytic E||mu_a - mu_b||^2 / E||x - mu||^2 for empirical class means."""
        n = self.samples_per_class
        within = (self.feature_dim * self.noise_sigma ** 2
                  + self.intra_class_subspace_dim * self.subspace_scale ** 2)
        between = 2 * self.feature_dim * self.prototype_scale ** 2 + 2 * within / n
        return between / ((1 - 1 / n) * within)


def _random_basis(rng, c: int, r: int) -> np.ndarray:
    return np.linalg.qr(rng.standard_normal((c, r)))[0]


def _sample_classes(spec: SyntheticSpec, class_ids, rng, shared_basis=None) -> FeatureBatch:
    c, r, n, s = spec.feature_dim, spec.intra_class_subspace_dim, spec.samples_per_class, spec.spatial
    maps, labels = [], []
    for cid in class_ids:
        proto = rng.standard_normal(c) * spec.prototype_scale
        x = np.repeat(proto[None], n, axis=0)
        if r:
            basis = shared_basis if shared_basis is not None else _random_basis(rng, c, r)
            x = x + (rng.standard_normal((n, r)) * spec.subspace_scale) @ basis.T
        x = x + rng.standard_normal((n, c)) * spec.noise_sigma
        grid = np.repeat(x[:, None, None, :], s, axis=1).repeat(s, axis=2)
        if s > 1:
            grid = grid + rng.standard_normal(grid.shape) * spec.spatial_jitter
        maps.append(grid)
        labels.append(np.full(n, cid))
    return FeatureBatch(np.concatenate(maps), np.concatenate(labels))


def generate_synthetic(spec: SyntheticSpec) -> tuple[FeatureBatch, FeatureBatch]:
    """Train classes 0..n_train-1 and disjoint test classes n_train..n_train+n_test-1."""
    spec.validate()
    rng = make_rng(spec.seed)
    shared = None
    if spec.shared_subspace and spec.intra_class_subspace_dim:
        shared = _random_basis(rng, spec.feature_dim, spec.intra_class_subspace_dim)
    train_ids = range(spec.n_classes_train)
    test_ids = range(spec.n_classes_train, spec.n_classes_train + spec.n_classes_test)
    train = _sample_classes(spec, train_ids, rng, shared)
    test = _sample_classes(spec, test_ids, rng, shared)
    assert not set(train.labels.tolist()) & set(test.labels.tolist())
    return train, test


def encode_features(batch: FeatureBatch) -> bytes:
    labels = np.asarray(batch.labels)
    if labels.min() < 0 or labels.max() > MAX_LABEL:
        raise FeatureFileError(f"labels must lie in [0, {MAX_LABEL}]")
    n, h, w, c = batch.maps.shape
    return (_HEADER.pack(MAGIC, VERSION, n, h, w, c)
            + np.ascontiguousarray(batch.maps, dtype="<f4").tobytes()
            + np.ascontiguousarray(labels, dtype="<u4").tobytes())


def decode_features(data: bytes, source: str = "<bytes>") -> FeatureBatch:
    if len(data) < _HEADER.size:
        raise FeatureFileError(f"{source}: truncated header: expected {_HEADER.size} bytes, "
                               f"got {len(data)}")
    magic, version, n, h, w, c = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FeatureFileError(f"{source}: bad magic {magic!r}")
    if version > VERSION or version == 0:
        raise FeatureFileError(f"{source}: unsupported version {version} (supported: {VERSION})")
    count = n * h * w * c
    expected = _HEADER.size + 4 * count + 4 * n
    if len(data) != expected:
        raise FeatureFileError(f"{source}: truncated payload: expected {expected} bytes, "
                               f"got {len(data)}")
    maps = np.frombuffer(data, "<f4", count, _HEADER.size).reshape(n, h, w, c)
    labels = np.frombuffer(data, "<u4", n, _HEADER.size + 4 * count)
    if n and labels.max() > MAX_LABEL:
        raise FeatureFileError(f"{source}: label {int(labels.max())} out of range")
    return FeatureBatch(maps.astype(np.float64), labels.astype(np.int64))


def save_features(batch: FeatureBatch, path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    data = encode_features(batch)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_features(path) -> FeatureBatch:
    path = Path(path)
    return decode_features(path.read_bytes(), str(path))
