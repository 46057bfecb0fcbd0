"""Blockwise training schedules, the end-to-end baseline and their telemetry."""

from __future__ import annotations

import csv
import time
from dataclasses import astuple, dataclass, field

import numpy as np

from .backbone import ConvBackbone, MLPBackbone, detach_features
from .config import TrainConfig
from .flow import sample_path
from .model import EndToEndStack, FlowModel, block_loss
from .optim import AdamW, clip_grad_norm, grad_norm
from .tensor import Tape, Tensor, add, reset_peak, softmax_cross_entropy, tape_metrics

TELEMETRY_HEADER = ("epoch", "block", "batch", "loss_flow", "loss_anchor", "loss_total",
                    "grad_var_block", "backbone_grad_norm", "peak_retained", "wall_ms")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, block: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, block {block}, batch {batch}")
        self.epoch, self.block, self.batch, self.value = epoch, block, batch, value


@dataclass
class TelemetryRecord:
    epoch: int
    block: int
    batch: int
    loss_flow: float
    loss_anchor: float
    loss_total: float
    grad_var_block: float
    backbone_grad_norm: float
    peak_retained: int
    wall_ms: float


def write_telemetry_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TELEMETRY_HEADER)
        for r in records:
            w.writerow([v if isinstance(v, int) else repr(float(v)) for v in astuple(r)])


@dataclass
class TrainResult:
    model: object
    telemetry: list = field(default_factory=list)
    steps: int = 0


class _Window:
    """Accumulates per-batch measurements for one block until flushed into a record."""

    def __init__(self, epoch: int, block: int):
        self.epoch, self.block = epoch, block
        self.rows: list = []
        self.grads: list = []

    def add(self, flow, anchor, total, grads, bb_norm, peak, wall_ms) -> None:
        self.rows.append((flow, anchor, total, bb_norm, peak, wall_ms))
        self.grads.append(grads)

    def __len__(self) -> int:
        return len(self.rows)

    def flush(self, batch: int) -> TelemetryRecord:
        a = np.array([r[:4] for r in self.rows], dtype=np.float64)
        g = np.stack(self.grads)
        var = float(g.var(axis=0).mean()) if len(self.grads) > 1 else 0.0
        rec = TelemetryRecord(self.epoch, self.block, batch, float(a[:, 0].mean()), float(a[:, 1].mean()),
                              float(a[:, 2].mean()), var, float(a[:, 3].mean()),
                              int(max(r[4] for r in self.rows)), float(sum(r[5] for r in self.rows)))
        self.rows, self.grads = [], []
        return rec


def _take(y, idx):
    if isinstance(y, np.ndarray):
        return y[idx]
    return [y[i] for i in idx]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _flat_grads(params) -> np.ndarray:
    return np.concatenate([(p.grad if p.grad is not None else np.zeros(p.shape)).ravel() for p in params])


def _zero(params) -> None:
    for p in params:
        p.grad = None


def _check(value: float, epoch: int, block: int, batch: int) -> None:
    if not np.isfinite(value):
        raise NonFiniteLossError(epoch, block, batch, value)


class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.t0 = 0.0

    def start(self) -> None:
        if self.enabled:
            self.t0 = time.perf_counter()

    def ms(self) -> float:
        return (time.perf_counter() - self.t0) * 1e3 if self.enabled else 0.0


def _probe_step(model: FlowModel, feats: Tensor, labels, opt: AdamW) -> None:
    params = model.probe.parameters()
    _zero(params)
    with Tape() as tape:
        loss = softmax_cross_entropy(model.probe(detach_features(feats)), labels)
        tape.backward(loss)
    opt.step(params)


def train_sequential(model: FlowModel, X, y, cfg: TrainConfig, *, path_rng: np.random.Generator,
                     data_rng: np.random.Generator) -> TrainResult:
    """For each epoch, each block k passes over the full data, stepping theta_k, backbone and head."""
    opt = AdamW(cfg.lr, cfg.weight_decay)
    probe_opt = AdamW(cfg.lr, cfg.weight_decay) if (cfg.probe_enabled and model.probe is not None) else None
    clock = _Clock(cfg.record_wall_time)
    bb_params = model.backbone.parameters()
    result = TrainResult(model)
    for epoch in range(cfg.sequential_epochs()):
        for k in range(model.T):
            params = model.block_params(k) + model.shared_params()
            win = _Window(epoch, k)
            b = -1
            for b, idx in enumerate(_batches(len(X), cfg.batch_size, data_rng)):
                yb = _take(y, idx)
                clock.start()
                _zero(params)
                reset_peak()
                with Tape() as tape:
                    feats = model.features(X[idx])
                    bl = block_loss(model, k, feats, yb, rng=path_rng, lam=cfg.lam)
                    _check(bl.total.item(), epoch, k, b)
                    tape.backward(bl.total)
                peak = tape_metrics()[1]
                grads = _flat_grads(model.block_params(k))
                bb_norm = grad_norm(bb_params)
                clip_grad_norm(params, cfg.grad_clip_norm)
                opt.step(params)
                if probe_opt is not None and k == 0:
                    _probe_step(model, feats, yb, probe_opt)
                result.steps += 1
                win.add(bl.flow.item(), bl.anchor.item(), bl.total.item(), grads, bb_norm, peak, clock.ms())
                if len(win) == cfg.telemetry_window:
                    result.telemetry.append(win.flush(b))
            if len(win):
                result.telemetry.append(win.flush(b))
    return result


def parallel_step(model: FlowModel, Xb, yb, path_rng: np.random.Generator, lam: float | None = None):
    """One parallel-schedule forward/backward; grads are left on the parameters.

    The backbone runs once; each block's tape re-enters the features as a
    fresh leaf, so only one block graph is alive at a time. Feature grads are
    summed and pushed through the backbone tape once.
    """
    n = len(Xb)
    shape = (n, model.head.emb.d) if model.task == "classification" else (n, model.head.M, model.head.emb.d)
    z0 = path_rng.standard_normal(shape)
    t = path_rng.uniform(0.0, 1.0, size=n)
    losses = []
    with Tape() as bb_tape:
        feats = model.features(Xb)
        acc = np.zeros(feats.shape)
        for k in range(model.T):
            with Tape() as tape:
                fk = Tensor(feats.data, requires_grad=True)
                bl = block_loss(model, k, fk, yb, z0=z0, t=t, lam=lam)
                if np.isfinite(bl.total.item()):
                    tape.backward(bl.total)
            losses.append(bl)
            if fk.grad is not None:
                acc += fk.grad
        bb_tape.backward(feats, acc)
    return feats, losses


def train_parallel(model: FlowModel, X, y, cfg: TrainConfig, *, path_rng: np.random.Generator,
                   data_rng: np.random.Generator) -> TrainResult:
    """Every block sees each batch with the same path sample; one optimizer step per batch."""
    opt = AdamW(cfg.lr, cfg.weight_decay)
    probe_opt = AdamW(cfg.lr, cfg.weight_decay) if (cfg.probe_enabled and model.probe is not None) else None
    clock = _Clock(cfg.record_wall_time)
    params = model.parameters() if model.probe is None else [
        p for p in model.parameters() if all(p is not q for q in model.probe.parameters())]
    bb_params = model.backbone.parameters()
    result = TrainResult(model)
    for epoch in range(cfg.epochs):
        wins = [_Window(epoch, k) for k in range(model.T)]
        b = -1
        for b, idx in enumerate(_batches(len(X), cfg.batch_size, data_rng)):
            yb = _take(y, idx)
            clock.start()
            _zero(params)
            reset_peak()
            feats, losses = parallel_step(model, X[idx], yb, path_rng, cfg.lam)
            for k, bl in enumerate(losses):
                _check(bl.total.item(), epoch, k, b)
            peak = tape_metrics()[1]
            grads = [_flat_grads(model.block_params(k)) for k in range(model.T)]
            bb_norm = grad_norm(bb_params)
            clip_grad_norm(params, cfg.grad_clip_norm)
            opt.step(params)
            if probe_opt is not None:
                _probe_step(model, feats, yb, probe_opt)
            result.steps += 1
            ms = clock.ms()
            for k, bl in enumerate(losses):
                wins[k].add(bl.flow.item(), bl.anchor.item(), bl.total.item(), grads[k], bb_norm, peak, ms)
            if len(wins[0]) == cfg.telemetry_window:
                result.telemetry.extend(w.flush(b) for w in wins)
        if len(wins[0]):
            result.telemetry.extend(w.flush(b) for w in wins)
    return result


def train(model: FlowModel, X, y, cfg: TrainConfig, *, path_rng, data_rng) -> TrainResult:
    fn = train_parallel if cfg.schedule == "parallel" else train_sequential
    return fn(model, X, y, cfg, path_rng=path_rng, data_rng=data_rng)


def train_baseline_endtoend(model: EndToEndStack, X, y, cfg: TrainConfig, *,
                            data_rng: np.random.Generator) -> TrainResult:
    """One global cross-entropy backpropagated through backbone and all T blocks."""
    opt = AdamW(cfg.lr, cfg.weight_decay)
    clock = _Clock(cfg.record_wall_time)
    params = model.parameters()
    bb_params = model.backbone.parameters()
    result = TrainResult(model)
    for epoch in range(cfg.epochs):
        wins = [_Window(epoch, k) for k in range(model.T)]
        b = -1
        for b, idx in enumerate(_batches(len(X), cfg.batch_size, data_rng)):
            clock.start()
            _zero(params)
            reset_peak()
            with Tape() as tape:
                loss = model.loss(X[idx], y[idx])
                _check(loss.item(), epoch, -1, b)
                tape.backward(loss)
            peak = tape_metrics()[1]
            grads = [_flat_grads(blk.parameters()) for blk in model.blocks]
            bb_norm = grad_norm(bb_params)
            clip_grad_norm(params, cfg.grad_clip_norm)
            opt.step(params)
            result.steps += 1
            ms = clock.ms()
            for k in range(model.T):
                wins[k].add(0.0, loss.item(), loss.item(), grads[k], bb_norm, peak, ms)
            if len(wins[0]) == cfg.telemetry_window:
                result.telemetry.extend(w.flush(b) for w in wins)
        if len(wins[0]):
            result.telemetry.extend(w.flush(b) for w in wins)
    return result


# ---------------------------------------------------------------------------
# gradient variance


def gradient_variance_probe(model, X, y, W: int, *, batch_size: int = 64, seed: int = 0, batches=None,
                            same_noise: bool = False) -> np.ndarray:
    """Mean elementwise variance of each block's parameter gradient across W batches.

    Parameters stay fixed. Flow models take each block's local loss; an
    :class:`EndToEndStack` takes the single global loss. ``batches`` may pass
    explicit index arrays; ``same_noise`` reuses one path draw for all of them.
    """
    if W < 2:
        raise ValueError(f"need at least 2 batches to estimate a variance, got W={W}")
    rng = np.random.default_rng(seed)
    if batches is None:
        batches = [rng.choice(len(X), size=min(batch_size, len(X)), replace=False) for _ in range(W)]
    batches = list(batches)[:W]
    if len(batches) < 2:
        raise ValueError("need at least 2 batches")
    T = model.T
    per_block = [[] for _ in range(T)]
    noise_seed = int(rng.integers(2**31 - 1))
    path_rng = np.random.default_rng(noise_seed)
    for idx in batches:
        Xb, yb = X[idx], _take(y, idx)
        if same_noise:
            path_rng = np.random.default_rng(noise_seed)
        if isinstance(model, EndToEndStack):
            model.zero_grad()
            with Tape() as tape:
                tape.backward(model.loss(Xb, yb))
            for k in range(T):
                per_block[k].append(_flat_grads(model.blocks[k].parameters()))
            continue
        z1_shape = model.head.targets(yb).shape
        z0 = path_rng.standard_normal(z1_shape)
        t = path_rng.uniform(0.0, 1.0, size=len(idx))
        for k in range(T):
            model.zero_grad()
            with Tape() as tape:
                tape.backward(block_loss(model, k, model.features(Xb), yb, z0=z0, t=t).total)
            per_block[k].append(_flat_grads(model.block_params(k)))
    model.zero_grad()
    return np.array([float(np.stack(g).var(axis=0).mean()) for g in per_block])


# ---------------------------------------------------------------------------
# activation memory


def backbone_activation_width(backbone) -> int:
    """Retained scalars per sample for one backbone forward."""
    if isinstance(backbone, MLPBackbone):
        return backbone.in_dim + 2 * sum(backbone.widths) + backbone.output_dim
    if isinstance(backbone, ConvBackbone):
        cin, h, w = backbone.in_shape
        total = 0
        for cout in backbone.channels:
            h, w = (h + 1) // 2, (w + 1) // 2
            total += h * w * (9 * cin + 2 * cout)  # patches, conv output, GELU output
            cin = cout
        return total + h * w * cin + backbone.output_dim  # flattened copy, final linear
    raise TypeError(f"no activation formula for {type(backbone).__name__}")


def predict_activation_memory(B: int, d: int, d_backbone: int, T: int, mode: str, *,
                              hidden: int | None = None, n_classes: int = 10) -> int:
    """Retained activation scalars for one classification training step.

    ``d_backbone`` is the backbone's per-sample count (see
    :func:`backbone_activation_width`). With H the field-MLP width and C the
    class count::

        shared (target + path)     5 B d
        block (time MLP + field)   B + 7 B d + 2 B H
        loss (flow + anchor)       5 B d + 2 B C + 4

    ``local`` holds backbone + shared + one block and its loss. ``endtoend``
    holds all T block graphs at once plus T - 1 scalars summing their losses.
    Assumes lambda > 0 and unit flow weight.
    """
    for name, v in (("B", B), ("d", d), ("d_backbone", d_backbone), ("T", T), ("n_classes", n_classes)):
        if v <= 0:
            raise ValueError(f"{name} must be positive")
    H = hidden or 4 * d
    base = B * d_backbone + 5 * B * d
    per_block = (B + 7 * B * d + 2 * B * H) + (5 * B * d + 2 * B * n_classes + 4)
    if mode == "local":
        return base + per_block
    if mode == "endtoend":
        return base - 1 + T * (per_block + 1)
    raise ValueError(f"mode must be local or endtoend, got {mode!r}")


def measure_step_memory(model: FlowModel, Xb, yb, mode: str, seed: int = 0) -> int:
    """Peak retained scalars of one training step's forward/backward.

    ``local`` runs block 0's loss alone; ``endtoend`` sums every block's loss
    on one tape over a shared target/path graph and backpropagates once.
    """
    rng = np.random.default_rng(seed)
    reset_peak()
    with Tape() as tape:
        feats = model.features(Xb)
        if mode == "local":
            total = block_loss(model, 0, feats, yb, rng=rng).total
        elif mode == "endtoend":
            path = sample_path(model.head.targets(yb), rng, couple=model.head.couple)
            total = None
            for k in range(model.T):
                lk = block_loss(model, k, feats, yb, path=path).total
                total = lk if total is None else add(total, lk)
        else:
            raise ValueError(f"mode must be local or endtoend, got {mode!r}")
        tape.backward(total)
    model.zero_grad()
    return tape_metrics()[1]


def measure_parallel_memory(model: FlowModel, Xb, yb, seed: int = 0) -> int:
    reset_peak()
    parallel_step(model, Xb, yb, np.random.default_rng(seed))
    model.zero_grad()
    return tape_metrics()[1]


def measure_baseline_memory(model: EndToEndStack, Xb, yb) -> int:
    reset_peak()
    with Tape() as tape:
        tape.backward(model.loss(Xb, yb))
    model.zero_grad()
    return tape_metrics()[1]


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R^2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2
