"""Targets, the linear noise-to-target path, flow blocks and their losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import MLP, Module, kaiming_uniform
from .tensor import (
    DimensionError,
    Parameter,
    Tensor,
    add,
    concat,
    gather_rows,
    linear,
    mean,
    mul,
    reshape,
    softmax_cross_entropy,
    sub,
)

DEFAULT_LAMBDA = 1.0


class ClassEmbeddings(Module):
    """Learnable class targets ``W_embed`` [C, d] and readout ``W_cls`` [d, C]."""

    def __init__(self, n_classes: int, d: int, rng: np.random.Generator):
        if n_classes < 2:
            raise ValueError("need at least two classes")
        self.n_classes = n_classes
        self.d = d
        self.W_embed = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_classes, d)))
        self.W_cls = Parameter(kaiming_uniform(rng, d, (d, n_classes)))


class DetectionEmbeddings(Module):
    """Query targets ``W_class[c] + W_box b`` plus the linear decoding heads.

    ``W_class`` has C + 1 rows; row C is background. ``W_box`` is stored
    transposed, [4, d], so a box row maps by ``b @ W_box``.
    """

    def __init__(self, n_classes: int, d: int, rng: np.random.Generator):
        self.n_classes = n_classes
        self.d = d
        self.W_class = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_classes + 1, d)))
        self.W_box = Parameter(kaiming_uniform(rng, 4, (4, d)))
        self.cls_head = Parameter(kaiming_uniform(rng, d, (d, n_classes + 1)))
        self.cls_bias = Parameter(np.zeros(n_classes + 1))
        self.box_head = Parameter(kaiming_uniform(rng, d, (d, 4)))
        self.box_bias = Parameter(np.zeros(4))

    @property
    def background(self) -> int:
        return self.n_classes


def make_class_target(labels, emb: ClassEmbeddings) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= emb.n_classes):
        raise ValueError(f"label out of range [0, {emb.n_classes})")
    return gather_rows(emb.W_embed, labels)


def canonical_order(objects) -> list:
    """Sort (class, box) pairs left to right, then top to bottom."""
    return sorted(objects, key=lambda o: (float(o[1][0]), float(o[1][1])))


def make_detection_target(targets, emb: DetectionEmbeddings, M: int) -> Tensor:
    """Build [B, M, d] query targets from a list of per-image (class, box) lists.

    Objects fill the first queries in canonical order; the rest are
    background with a zero box.
    """
    B = len(targets)
    cls = np.full((B, M), emb.background, dtype=np.int64)
    boxes = np.zeros((B, M, 4))
    for i, objs in enumerate(targets):
        if len(objs) > M:
            raise ValueError(f"{len(objs)} objects exceed {M} queries")
        for j, (c, b) in enumerate(canonical_order(objs)):
            if not 0 <= int(c) < emb.n_classes:
                raise ValueError(f"class {c} out of range [0, {emb.n_classes})")
            cls[i, j] = int(c)
            boxes[i, j] = b
    rows = add(gather_rows(emb.W_class, cls.reshape(-1)), linear(Tensor(boxes.reshape(-1, 4)), emb.W_box))
    return reshape(rows, (B, M, emb.d))


@dataclass
class PathSample:
    z0: np.ndarray
    z1: Tensor
    t: np.ndarray
    zt: Tensor
    v_star: Tensor

    def t_like(self, shape) -> np.ndarray:
        return _rowwise(self.t, shape)


def _rowwise(t: np.ndarray, shape) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.broadcast_to(t.reshape(t.shape + (1,) * (len(shape) - t.ndim)), shape).copy()


def sample_path(z1: Tensor, rng: np.random.Generator | None = None, t=None, z0=None, couple=None) -> PathSample:
    """Draw z0 ~ N(0, I) and one t ~ U[0, 1] per row; build z_t and z1 - z0.

    ``couple(z0, z1)`` may re-pair the target with the drawn noise before the
    path is built (used for query sets).
    """
    if z0 is None:
        z0 = rng.standard_normal(z1.shape)
    z0 = np.asarray(z0, dtype=np.float64).reshape(z1.shape)
    if couple is not None:
        z1 = couple(z0, z1)
    if t is None:
        t = rng.uniform(0.0, 1.0, size=z1.shape[0])
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (z1.shape[0],)).copy()
    tb = _rowwise(t, z1.shape)
    zt = add(mul(z1, Tensor(tb)), Tensor((1.0 - tb) * z0))
    v_star = sub(z1, Tensor(z0))
    return PathSample(z0, z1, t, zt, v_star)


class TimeEmbed(Module):
    """Scalar t -> Linear(1, d) -> GELU -> Linear(d, d)."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.mlp = MLP(1, d, d, rng)

    def __call__(self, t) -> Tensor:
        if isinstance(t, Tensor):
            return self.mlp(reshape(t, (-1, 1)))
        t = np.asarray(t, dtype=np.float64)
        return self.mlp(Tensor(t.reshape(-1, 1)))


class FlowBlock(Module):
    """One vector-field predictor: MLP(concat(f(x), z_t + e_t))."""

    def __init__(self, d: int, rng: np.random.Generator, hidden: int | None = None, block_index: int = 0):
        self.d = d
        self.hidden = hidden or 4 * d
        self.block_index = block_index
        self.time_mlp = TimeEmbed(d, rng)
        self.field_mlp = MLP(2 * d, self.hidden, d, rng)

    def time_embed(self, t) -> Tensor:
        return self.time_mlp(t)

    def __call__(self, zt: Tensor, features: Tensor, t) -> Tensor:
        return block_forward(self, zt, features, t)


def time_embed(block: FlowBlock, t) -> Tensor:
    return block.time_embed(t)


def block_forward(block: FlowBlock, zt: Tensor, features: Tensor, t) -> Tensor:
    zt = zt if isinstance(zt, Tensor) else Tensor(zt)
    features = features if isinstance(features, Tensor) else Tensor(features)
    if zt.ndim != 2 or zt.shape != features.shape or zt.shape[1] != block.d:
        raise DimensionError(f"block expects z_t and features of shape [B, {block.d}], got {zt.shape} and {features.shape}")
    h = concat([features, add(zt, block.time_embed(t))], axis=-1)
    return block.field_mlp(h)


def flow_loss(v_hat: Tensor, v_star: Tensor) -> Tensor:
    """Mean squared error over batch and dimensions."""
    if v_hat.shape != v_star.shape:
        raise DimensionError(f"flow_loss: {v_hat.shape} vs {v_star.shape}")
    diff = sub(v_hat, v_star)
    return mean(mul(diff, diff))


def transported_estimate(zt: Tensor, v_hat: Tensor, t) -> Tensor:
    """z~1 = z_t + (1 - t) v_hat with one t per row."""
    zt = zt if isinstance(zt, Tensor) else Tensor(zt)
    v_hat = v_hat if isinstance(v_hat, Tensor) else Tensor(v_hat)
    if zt.shape != v_hat.shape:
        raise DimensionError(f"transported_estimate: {zt.shape} vs {v_hat.shape}")
    return add(zt, mul(v_hat, Tensor(1.0 - _rowwise(t, v_hat.shape))))


def class_logits(z: Tensor, emb: ClassEmbeddings) -> Tensor:
    return linear(z, emb.W_cls)


def anchor_loss_classification(z1_tilde: Tensor, labels, emb: ClassEmbeddings) -> Tensor:
    return softmax_cross_entropy(class_logits(z1_tilde, emb), labels)


def combined_loss(flow, anchor, lam: float | None = None, flow_weight: float = 1.0):
    """flow_weight * flow + lam * anchor; ``lam`` defaults to 1.0."""
    lam = DEFAULT_LAMBDA if lam is None else lam
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if isinstance(flow, Tensor) or isinstance(anchor, Tensor):
        f = flow if flow_weight == 1.0 else flow * flow_weight
        return add(f, anchor * lam) if lam != 0 else f
    return flow_weight * flow + lam * anchor
