"""Inference strategies: single-step, ensemble, multi-step Euler, and the linear probe.

Blocks are any callables ``block(z, features, t) -> velocity``; nothing here
opens a tape, so no activations are retained.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .backbone import detach_features
from .nn import Linear
from .optim import AdamW
from .tensor import Tape, Tensor, softmax_cross_entropy

MODES = ("probe", "single_step", "ensemble", "multi_step")


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _velocity(block, z: np.ndarray, features, t: float) -> np.ndarray:
    return _arr(block(Tensor(z), features, np.full(z.shape[0], t)))


class ExactField:
    """Oracle block returning the true constant velocity z1 - z0."""

    def __init__(self, z0, z1):
        self.v = _arr(z1) - _arr(z0)

    def __call__(self, z, features, t) -> np.ndarray:
        return self.v.copy()


class ZeroField:
    def __call__(self, z, features, t) -> np.ndarray:
        return np.zeros(_arr(z).shape)


def single_step(blocks, features, z0, block: int = 0) -> np.ndarray:
    """z1_hat = z0 + v_k(z0, f, 0) for the selected block."""
    if not 0 <= block < len(blocks):
        raise IndexError(f"block {block} out of range for {len(blocks)} blocks")
    z0 = _arr(z0)
    return z0 + _velocity(blocks[block], z0, features, 0.0)


def ensemble(blocks, features, z0) -> np.ndarray:
    """Mean of the per-block single-step estimates from the same z0."""
    if not blocks:
        raise ValueError("ensemble needs at least one block")
    z0 = _arr(z0)
    return np.mean([z0 + _velocity(b, z0, features, 0.0) for b in blocks], axis=0)


def multi_step(blocks, features, z0) -> list:
    """Explicit Euler with dt = 1/T; block k integrates [k/T, (k+1)/T].

    Returns the T + 1 states z_0 .. z_T.
    """
    T = len(blocks)
    if T < 1:
        raise ValueError("multi_step needs at least one block")
    z = _arr(z0).copy()
    traj = [z.copy()]
    dt = 1.0 / T
    for k, block in enumerate(blocks):
        z = z + dt * _velocity(block, z, features, k * dt)
        traj.append(z.copy())
    return traj


def block_for_time(t: float, T: int) -> int:
    """Zero-based index of the block responsible for time t."""
    return min(int(np.floor(T * t)), T - 1)


def decode_classification(z, W_cls) -> np.ndarray:
    """argmax_c (W_cls^T z)[c]; ties go to the lowest class id."""
    return np.argmax(_arr(z) @ _arr(W_cls), axis=-1)


def majority_vote(predictions) -> np.ndarray:
    """Row-wise mode over repeated predictions [R, N]; ties go to the lowest id."""
    P = np.asarray(predictions, dtype=np.int64)
    n_cls = int(P.max()) + 1
    counts = np.zeros((P.shape[1], n_cls), dtype=np.int64)
    for row in P:
        counts[np.arange(P.shape[1]), row] += 1
    return np.argmax(counts, axis=1)


# ---------------------------------------------------------------------------
# classification drivers


def draw_z0(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def predict_latent(model, X, mode: str, rng: np.random.Generator, block: int = 0) -> np.ndarray:
    f = model.features(X)
    shape = (len(X), model.head.emb.d) if model.task == "classification" else (len(X), model.head.M, model.head.emb.d)
    z0 = draw_z0(rng, shape)
    if mode == "single_step":
        return single_step(model.blocks, f, z0, block)
    if mode == "ensemble":
        return ensemble(model.blocks, f, z0)
    if mode == "multi_step":
        return multi_step(model.blocks, f, z0)[-1]
    raise ValueError(f"unknown flow inference mode {mode!r}")


def classify(model, X, mode: str, rng: np.random.Generator, block: int = 0, votes: int = 1) -> np.ndarray:
    """Labels from one z0 draw, or the majority over ``votes`` draws."""
    preds = [model.head.decode(predict_latent(model, X, mode, rng, block)) for _ in range(votes)]
    return preds[0] if votes == 1 else majority_vote(preds)


def accuracy(pred, y) -> float:
    y = np.asarray(y)
    return float(np.mean(np.asarray(pred) == y)) if y.size else 0.0


@dataclass
class CurvePoint:
    step: int
    t: float
    metric: float


def refinement_curve(blocks, features, z0, metric) -> list:
    """``metric(z_k)`` after every Euler step, including the starting state."""
    traj = multi_step(blocks, features, z0)
    T = len(blocks)
    return [CurvePoint(k, k / T, float(metric(z))) for k, z in enumerate(traj)]


def write_curve_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t", "metric"])
        for p in curve:
            w.writerow([p.step, repr(float(p.t)), repr(float(p.metric))])


# ---------------------------------------------------------------------------
# linear probe


def linear_probe_train_eval(backbone, X_train, y_train, X_test, y_test, n_classes: int, *,
                            rng: np.random.Generator, max_epochs: int = 200, tol: float = 1e-5,
                            lr: float = 1e-2) -> float:
    """Full-batch AdamW on a d -> C linear head over detached features; test accuracy.

    Stops after ``max_epochs`` or once the loss changes by less than ``tol``.
    """
    F_tr = detach_features(backbone(X_train))
    F_te = detach_features(backbone(X_test))
    head = Linear(F_tr.shape[1], n_classes, rng)
    opt = AdamW(lr, 0.0)
    params = head.parameters()
    prev = np.inf
    for _ in range(max_epochs):
        head.zero_grad()
        with Tape() as tape:
            loss = softmax_cross_entropy(head(F_tr), y_train)
            tape.backward(loss)
        opt.step(params)
        if abs(prev - loss.item()) < tol:
            break
        prev = loss.item()
    return accuracy(np.argmax(head(F_te).data, axis=-1), y_test)
