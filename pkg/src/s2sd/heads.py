"""Pooling over fixed feature maps and the base/target embedding branches."""
from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node

POOL_MODES = ("avg", "avg_plus_max")


@dataclass
class FeatureBatch:
    """Feature maps of shape (B, H, W, C) with one integer label per sample."""

    maps: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.maps.ndim != 4:
            raise ValueError(f"maps must be B x H x W x C, got shape {self.maps.shape}")
        if self.maps.shape[0] != self.labels.shape[0]:
            raise ValueError("maps and labels disagree on batch size")
        if self.maps.shape[0] < 2 or self.maps.shape[3] < 1:
            raise ValueError("need B >= 2 and C >= 1")

    def __len__(self) -> int:
        return self.maps.shape[0]

    @property
    def channels(self) -> int:
        return self.maps.shape[3]

    def subset(self, index) -> "FeatureBatch":
        return FeatureBatch(self.maps[index], self.labels[index])


@dataclass
class HeadParams:
    """Layers as ``(weight (out, in), bias (out,))`` pairs, ReLU in between.

    Entries are numpy arrays when stored and :class:`Node` objects while a
    differentiable forward pass is being built.
    """

    layers: list
    branch_id: str = "base"

    def __post_init__(self):
        if not 1 <= len(self.layers) <= 3:
            raise ValueError(f"head depth must be 1..3, got {len(self.layers)}")
        prev = None
        for w, b in self.layers:
            out_d, in_d = np.shape(_val(w))
            if np.shape(_val(b)) != (out_d,):
                raise ValueError("bias does not match weight rows")
            if prev is not None and in_d != prev:
                raise ValueError(f"layer dims do not chain: {prev} -> {in_d}")
            prev = out_d

    @property
    def in_dim(self) -> int:
        return np.shape(_val(self.layers[0][0]))[1]

    @property
    def out_dim(self) -> int:
        return np.shape(_val(self.layers[-1][0]))[0]

    @property
    def depth(self) -> int:
        return len(self.layers)

    def arrays(self) -> list[np.ndarray]:
        return [_val(t) for layer in self.layers for t in layer]

    def rebind(self, tensors: Sequence) -> "HeadParams":
        """Same structure with the flat tensor list substituted in."""
        it = iter(tensors)
        return HeadParams([(next(it), next(it)) for _ in self.layers], self.branch_id)

    def copy(self) -> "HeadParams":
        return self.rebind([a.copy() for a in self.arrays()])


@dataclass
class EmbeddingBatch:
    embeddings: Node
    branch_id: str = "base"
    normalized: bool = True

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def value(self) -> np.ndarray:
        return self.embeddings.value


def _val(t):
    return t.value if isinstance(t, Node) else np.asarray(t)


def pool(features: FeatureBatch | np.ndarray, mode: str = "avg") -> np.ndarray:
    """Global pooling over the spatial grid: mean, or mean concatenated with max."""
    maps = features.maps if isinstance(features, FeatureBatch) else np.asarray(features, float)
    if mode not in POOL_MODES:
        raise ValueError(f"unknown pooling mode {mode!r}")
    avg = maps.mean(axis=(1, 2))
    if mode == "avg":
        return avg
    return np.concatenate([avg, maps.max(axis=(1, 2))], axis=1)


def init_head(in_dim: int, out_dim: int, depth: int = 1, hidden_dim: int | None = None,
              seed: int = 0, branch_id: str = "base") -> HeadParams:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)) and zero biases."""
    if min(in_dim, out_dim) <= 0 or depth < 1:
        raise ValueError("dimensions and depth must be positive")
    hidden_dim = hidden_dim or out_dim
    dims = [in_dim] + [hidden_dim] * (depth - 1) + [out_dim]
    rng = np.random.Generator(np.random.Philox(seed))
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        layers.append((rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return HeadParams(layers, branch_id)


def project(pooled, head: HeadParams) -> Node:
    """Un-normalized head output."""
    x = dc.as_node(pooled)
    if x.shape[1] != head.in_dim:
        raise dc.ShapeError("embed", x.shape, (head.in_dim, head.out_dim))
    for i, (w, b) in enumerate(head.layers):
        if i:
            x = dc.relu(x)
        x = dc.linear(x, w, b)
    return x


def embed(pooled, head: HeadParams) -> EmbeddingBatch:
    return EmbeddingBatch(dc.l2_normalize(project(pooled, head)), head.branch_id, True)


def normalize_features(pooled, branch_id: str = "features") -> EmbeddingBatch:
    return EmbeddingBatch(dc.l2_normalize(pooled), branch_id, True)


# -- checkpoints --------------------------------------------------------------
#
# One record per head:
#   b"S2SDHEAD branch=<id> in=<in> out=<out> depth=<n>\n"
#   per layer: u32 rows, u32 cols, rows*cols f64 weights, rows f64 biases
# All binary fields little-endian.

def _encode_head(head: HeadParams) -> bytes:
    buf = io.BytesIO()
    if any(c.isspace() for c in head.branch_id):
        raise ValueError("branch id must not contain whitespace")
    buf.write(f"S2SDHEAD branch={head.branch_id} in={head.in_dim} out={head.out_dim} "
              f"depth={head.depth}\n".encode("ascii"))
    for w, b in head.layers:
        w, b = _val(w), _val(b)
        buf.write(struct.pack("<II", *w.shape))
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(heads: Sequence[HeadParams], path) -> None:
    path = Path(path)
    data = b"".join(_encode_head(h) for h in heads)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> dict[str, HeadParams]:
    data = Path(path).read_bytes()
    heads, pos = {}, 0
    while pos < len(data):
        end = data.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated head header at byte {pos}")
        fields = data[pos:end].decode("ascii", errors="replace").split()
        if not fields or fields[0] != "S2SDHEAD":
            raise CheckpointError(f"{path}: bad head header at byte {pos}")
        try:
            meta = dict(f.split("=", 1) for f in fields[1:])
            depth = int(meta["depth"])
            meta["branch"], int(meta["in"]), int(meta["out"])
        except (ValueError, KeyError):
            raise CheckpointError(f"{path}: malformed head header at byte {pos}") from None
        pos = end + 1
        layers = []
        for _ in range(depth):
            if pos + 8 > len(data):
                raise CheckpointError(f"{path}: truncated layer header for head {meta['branch']}")
            rows, cols = struct.unpack_from("<II", data, pos)
            pos += 8
            nbytes = 8 * (rows * cols + rows)
            if pos + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated layer data for head {meta['branch']}")
            w = np.frombuffer(data, "<f8", rows * cols, pos).reshape(rows, cols).astype(np.float64)
            pos += 8 * rows * cols
            b = np.frombuffer(data, "<f8", rows, pos).astype(np.float64)
            pos += 8 * rows
            layers.append((w, b))
        try:
            head = HeadParams(layers, meta["branch"])
        except ValueError as err:
            raise CheckpointError(f"{path}: {err}") from None
        if head.in_dim != int(meta["in"]) or head.out_dim != int(meta["out"]):
            raise CheckpointError(f"{path}: header dims disagree with layer shapes")
        heads[head.branch_id] = head
    return heads


class TargetBank:
    """Several target heads of equal depth evaluated as one wide head.

    The first layers share the pooled input and are stacked row-wise into one
    weight matrix; deeper layers act block-diagonally via
    :func:`diffcore.block_linear`, so every head keeps independent parameters
    and one projection costs a fixed number of graph nodes.

    ``tensors`` is ``[W_0, b_0]`` followed, per deeper layer, by one weight per
    head and the concatenated bias.
    """

    def __init__(self, heads: Sequence[HeadParams]):
        if not heads or len({h.depth for h in heads}) != 1 or len({h.in_dim for h in heads}) != 1:
            raise ValueError("bank heads must share depth and input dim")
        self.branch_ids = [h.branch_id for h in heads]
        self.depth = heads[0].depth
        self.n_heads = len(heads)
        self.out_dims = [h.out_dim for h in heads]
        self.first_rows = [np.shape(_val(h.layers[0][0]))[0] for h in heads]
        self.tensors = [np.concatenate([_val(h.layers[0][0]) for h in heads], axis=0),
                        np.concatenate([_val(h.layers[0][1]) for h in heads])]
        for l in range(1, self.depth):
            self.tensors += [_val(h.layers[l][0]) for h in heads]
            self.tensors.append(np.concatenate([_val(h.layers[l][1]) for h in heads]))

    def arrays(self) -> list:
        return [_val(t) for t in self.tensors]

    def rebind(self, tensors: Sequence) -> "TargetBank":
        bank = object.__new__(TargetBank)
        bank.__dict__.update(self.__dict__)
        bank.tensors = list(tensors)
        return bank

    def _layer_slices(self):
        yield 0, slice(0, 2)
        for l in range(1, self.depth):
            start = 2 + (l - 1) * (self.n_heads + 1)
            yield l, slice(start, start + self.n_heads + 1)

    def project(self, pooled) -> Node:
        """Concatenated un-normalized outputs of all heads, (B, sum(out_dims))."""
        x = dc.as_node(pooled)
        for l, sl in self._layer_slices():
            ts = self.tensors[sl]
            if l == 0:
                x = dc.linear(x, ts[0], ts[1])
            else:
                x = dc.block_linear(dc.relu(x), ts[:-1], ts[-1])
        return x

    def unpack(self) -> list[HeadParams]:
        tensors = self.arrays()
        layers = [[] for _ in range(self.n_heads)]
        for l, sl in self._layer_slices():
            ts = tensors[sl]
            ws = (np.split(ts[0], np.cumsum(self.first_rows)[:-1], axis=0) if l == 0
                  else ts[:-1])
            bs = np.split(ts[-1], np.cumsum([w.shape[0] for w in ws])[:-1])
            for k in range(self.n_heads):
                layers[k].append((np.array(ws[k]), np.array(bs[k])))
        return [HeadParams(ls, bid) for ls, bid in zip(layers, self.branch_ids)]
