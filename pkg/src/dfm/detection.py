"""Set-valued flow matching for detection.

Boxes are (cx, cy, w, h) in [0, 1]. L1 is taken in that parameterisation and
GIoU in corner (x1, y1, x2, y2) form.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .flow import DetectionEmbeddings, TimeEmbed, make_detection_target
from .nn import MLP, LayerNorm, Linear, Module
from .tensor import (
    DimensionError,
    Tensor,
    abs_,
    add,
    concat,
    div,
    gather_rows,
    linear,
    log_softmax_np,
    matmul,
    maximum,
    minimum,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    softmax,
    softmax_cross_entropy,
    sub,
    sum_,
    transpose,
)


@dataclass(frozen=True)
class DetectionLossWeights:
    cls: float = 1.0
    bbox: float = 5.0
    giou: float = 2.0
    background: float = 0.1
    flow: float = 0.1


DEFAULT_WEIGHTS = DetectionLossWeights()


# ---------------------------------------------------------------------------
# boxes


def to_xyxy(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def _check_boxes(b: np.ndarray) -> None:
    if np.any(b[..., 2] <= 0) or np.any(b[..., 3] <= 0):
        raise ValueError("degenerate box with zero width or height")


def pairwise_iou_giou(a, b) -> tuple[np.ndarray, np.ndarray]:
    """IoU and GIoU matrices between box sets a [n, 4] and b [m, 4]."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    _check_boxes(a)
    _check_boxes(b)
    A, B = to_xyxy(a)[:, None, :], to_xyxy(b)[None, :, :]
    iw = np.clip(np.minimum(A[..., 2], B[..., 2]) - np.maximum(A[..., 0], B[..., 0]), 0, None)
    ih = np.clip(np.minimum(A[..., 3], B[..., 3]) - np.maximum(A[..., 1], B[..., 1]), 0, None)
    inter = iw * ih
    # areas from the same corners as the intersection, so identical boxes give exactly 1
    area_a = (A[..., 2] - A[..., 0]) * (A[..., 3] - A[..., 1])
    area_b = (B[..., 2] - B[..., 0]) * (B[..., 3] - B[..., 1])
    union = area_a + area_b - inter
    iou = np.minimum(inter / union, 1.0)
    hull = (np.maximum(A[..., 2], B[..., 2]) - np.minimum(A[..., 0], B[..., 0])) * (
        np.maximum(A[..., 3], B[..., 3]) - np.minimum(A[..., 1], B[..., 1]))
    return iou, np.clip(iou - (hull - union) / hull, -1.0, iou)


def iou(a, b) -> float:
    return float(pairwise_iou_giou(a, b)[0][0, 0])


def giou(a, b) -> float:
    """Generalized IoU of two boxes, in [-1, 1]."""
    return float(pairwise_iou_giou(a, b)[1][0, 0])


def giou_tensor(pred: Tensor, target: Tensor) -> Tensor:
    """Row-wise GIoU [N, 1] between predicted and target boxes, differentiable."""
    if pred.shape != target.shape or pred.shape[-1] != 4:
        raise DimensionError(f"giou_tensor: {pred.shape} vs {target.shape}")

    def corners(b):
        cx, cy, w, h = (slice_(b, (slice(None), slice(i, i + 1))) for i in range(4))
        hw, hh = scale(w, 0.5), scale(h, 0.5)
        return sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh), mul(w, h)

    ax1, ay1, ax2, ay2, area_a = corners(pred)
    bx1, by1, bx2, by2, area_b = corners(target)
    iw = relu(sub(minimum(ax2, bx2), maximum(ax1, bx1)))
    ih = relu(sub(minimum(ay2, by2), maximum(ay1, by1)))
    inter = mul(iw, ih)
    union = sub(add(area_a, area_b), inter)
    hull = mul(sub(maximum(ax2, bx2), minimum(ax1, bx1)), sub(maximum(ay2, by2), minimum(ay1, by1)))
    return sub(div(inter, union), div(sub(hull, union), hull))


# ---------------------------------------------------------------------------
# Hungarian matching


@dataclass
class Matching:
    pairs: list  # (pred index, gt index)
    n_pred: int

    @property
    def unmatched(self) -> list:
        used = {i for i, _ in self.pairs}
        return [i for i in range(self.n_pred) if i not in used]


def _hungarian_square(cost: np.ndarray) -> np.ndarray:
    """Row -> column minimum-cost assignment for a square matrix, O(n^3)."""
    n = cost.shape[0]
    INF = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[col] = row matched to col (1-based, 0 = none)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cols = np.flatnonzero(free) + 1
            cur = cost[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            j1 = cols[np.argmin(minv[cols])]
            delta = minv[j1]
            used_cols = np.flatnonzero(used)
            u[p[used_cols]] += delta
            v[used_cols] -= delta
            minv[cols] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assign[p[j] - 1] = j - 1
    return assign


def hungarian(cost) -> Matching:
    """Minimum-cost injective assignment of every gt column to a pred row.

    Rectangular input (n_gt < n_pred) is padded with constant dummy columns,
    which cannot change which real assignment is optimal.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionError(f"cost must be 2-d, got {cost.shape}")
    n_pred, n_gt = cost.shape
    if n_gt > n_pred:
        raise ValueError(f"{n_gt} ground-truth objects exceed {n_pred} predictions")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    if n_gt == 0:
        return Matching([], n_pred)
    span = float(np.abs(cost).max()) if cost.size else 0.0
    big = 2.0 * span * n_pred + 1.0
    square = np.full((n_pred, n_pred), big)
    square[:, :n_gt] = cost
    assign = _hungarian_square(square)
    pairs = sorted((int(i), int(j)) for i, j in enumerate(assign) if j < n_gt)
    return Matching(pairs, n_pred)


def matching_cost(logits, boxes, targets, weights: DetectionLossWeights = DEFAULT_WEIGHTS) -> np.ndarray:
    """cost[i, j] = -w_cls p_i(c_j) + w_bbox L1(b_i, b_j) + w_giou (1 - GIoU(b_i, b_j))."""
    logits = np.asarray(logits, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    if not targets:
        raise ValueError("matching cost needs at least one target")
    cls = np.array([int(c) for c, _ in targets])
    gt = np.array([np.asarray(b, dtype=np.float64) for _, b in targets])
    prob = np.exp(log_softmax_np(logits))
    l1 = np.abs(boxes[:, None, :] - gt[None, :, :]).sum(axis=-1)
    _, g = pairwise_iou_giou(boxes, gt)
    return -weights.cls * prob[:, cls] + weights.bbox * l1 + weights.giou * (1.0 - g)


# ---------------------------------------------------------------------------
# model pieces


def _broadcast_rows(x: Tensor, M: int) -> Tensor:
    """[B, d] -> [B, M, d] by repeating each row."""
    B = x.shape[0]
    return reshape(gather_rows(x, np.repeat(np.arange(B), M)), (B, M, x.shape[-1]))


class DetectionFlowBlock(Module):
    """Single-head query self-attention followed by the field MLP.

    The image enters as the pooled feature vector broadcast to every query
    (stand-in for token-level cross-attention).
    """

    def __init__(self, d: int, rng: np.random.Generator, hidden: int | None = None, block_index: int = 0):
        self.d = d
        self.hidden = hidden or 4 * d
        self.block_index = block_index
        self.time_mlp = TimeEmbed(d, rng)
        self.ln_pre = LayerNorm(d)
        self.q = Linear(d, d, rng, bias=False)
        self.k = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng, bias=False)
        self.o = Linear(d, d, rng)
        self.ln_post = LayerNorm(d)
        self.field_mlp = MLP(2 * d, self.hidden, d, rng)

    def time_embed(self, t) -> Tensor:
        return self.time_mlp(t)

    def attention_weights(self, h: Tensor) -> Tensor:
        scores = scale(matmul(self.q(h), transpose(self.k(h))), 1.0 / np.sqrt(self.d))
        return softmax(scores)

    def __call__(self, z: Tensor, features: Tensor, t) -> Tensor:
        return detection_block_forward(self, z, features, t)


def detection_block_forward(block: DetectionFlowBlock, z: Tensor, features: Tensor, t) -> Tensor:
    z = z if isinstance(z, Tensor) else Tensor(z)
    features = features if isinstance(features, Tensor) else Tensor(features)
    if z.ndim != 3 or z.shape[-1] != block.d or features.shape != (z.shape[0], block.d):
        raise DimensionError(f"detection block expects [B, M, {block.d}] queries and [B, {block.d}] features, "
                             f"got {z.shape} and {features.shape}")
    M = z.shape[1]
    u = add(z, _broadcast_rows(block.time_embed(t), M))
    h = block.ln_pre(u)
    att = block.o(matmul(block.attention_weights(h), block.v(h)))
    u2 = block.ln_post(add(u, att))
    return block.field_mlp(concat([_broadcast_rows(features, M), u2], axis=-1))


COUPLINGS = ("canonical", "ot")


def ot_query_permutation(z0, z1) -> np.ndarray:
    """Per-image assignment [B, M]: noise row i is paired with target row perm[b, i]."""
    z0, z1 = np.asarray(z0), np.asarray(z1)
    B, M, _ = z1.shape
    perm = np.empty((B, M), dtype=np.int64)
    for b in range(B):
        cost = ((z0[b][:, None, :] - z1[b][None, :, :]) ** 2).sum(-1)
        for i, j in hungarian(cost).pairs:
            perm[b, i] = j
    return perm


def permute_queries(z: Tensor, perm: np.ndarray) -> Tensor:
    B, M, d = z.shape
    flat = (perm + M * np.arange(B)[:, None]).reshape(-1)
    return reshape(gather_rows(reshape(z, (B * M, d)), flat), (B, M, d))


class DetectionHead(Module):
    """Query targets, decoding heads and the matched detection loss."""

    task = "detection"

    def __init__(self, n_classes: int, d: int, M: int, rng: np.random.Generator,
                 weights: DetectionLossWeights = DEFAULT_WEIGHTS, coupling: str = "canonical"):
        if coupling not in COUPLINGS:
            raise ValueError(f"coupling must be one of {COUPLINGS}, got {coupling!r}")
        self.emb = DetectionEmbeddings(n_classes, d, rng)
        self.n_classes = n_classes
        self.M = M
        self.weights = weights
        self.coupling = coupling

    @property
    def flow_weight(self) -> float:
        return self.weights.flow

    def targets(self, batch_targets) -> Tensor:
        return make_detection_target(batch_targets, self.emb, self.M)

    def couple(self, z0, z1: Tensor) -> Tensor:
        """Re-pair target queries with noise queries.

        "canonical" keeps the sorted target order. "ot" permutes each image's
        target rows to minimise the summed squared distance to the noise rows,
        which gives a permutation-equivariant block a learnable target.
        """
        if self.coupling == "canonical":
            return z1
        return permute_queries(z1, ot_query_permutation(z0, z1.data))

    def decode_tensors(self, z: Tensor) -> tuple[Tensor, Tensor]:
        flat = reshape(z, (-1, z.shape[-1]))
        e = self.emb
        return linear(flat, e.cls_head, e.cls_bias), sigmoid(linear(flat, e.box_head, e.box_bias))

    def decode(self, z) -> tuple[np.ndarray, np.ndarray]:
        """Numpy logits [B, M, C+1] and boxes [B, M, 4] for latent queries."""
        z = np.asarray(z.data if isinstance(z, Tensor) else z)
        logits, boxes = self.decode_tensors(Tensor(z))
        B, M = z.shape[:2]
        return logits.data.reshape(B, M, -1), boxes.data.reshape(B, M, 4)

    def anchor_loss(self, z1_tilde: Tensor, batch_targets) -> Tensor:
        logits, boxes = self.decode_tensors(z1_tilde)
        B, M = z1_tilde.shape[:2]
        L = logits.data.reshape(B, M, -1)
        Bx = boxes.data.reshape(B, M, 4)
        matchings = [hungarian(matching_cost(L[i], Bx[i], objs, self.weights)) if objs else Matching([], M)
                     for i, objs in enumerate(batch_targets)]
        total, _ = detection_loss(logits, boxes, batch_targets, matchings, self.n_classes, self.weights)
        return total


def detection_loss(logits: Tensor, boxes: Tensor, batch_targets, matchings, n_classes: int,
                   weights: DetectionLossWeights = DEFAULT_WEIGHTS):
    """Matched set loss over flattened queries [B*M, C+1] / [B*M, 4].

    Returns ``(total, components)``. Classification covers every query
    (unmatched ones target background, down-weighted); box terms cover the
    matched pairs and are averaged over them.
    """
    B = len(batch_targets)
    M = logits.shape[0] // max(B, 1)
    labels = np.full(B * M, n_classes, dtype=np.int64)
    rows, gt = [], []
    for i, (objs, m) in enumerate(zip(batch_targets, matchings)):
        for p, j in m.pairs:
            labels[i * M + p] = int(objs[j][0])
            rows.append(i * M + p)
            gt.append(np.asarray(objs[j][1], dtype=np.float64))
    cw = np.ones(n_classes + 1)
    cw[n_classes] = weights.background
    ce = softmax_cross_entropy(logits, labels, cw)
    total = scale(ce, weights.cls)
    comps = {"cls": ce.item(), "l1": 0.0, "giou": 0.0}
    if rows:
        n = float(len(rows))
        pb = gather_rows(boxes, np.array(rows))
        gb = Tensor(np.array(gt))
        l1 = scale(sum_(abs_(sub(pb, gb))), 1.0 / n)
        gl = scale(sum_(scale(giou_tensor(pb, gb), -1.0) + 1.0), 1.0 / n)
        total = add(add(total, scale(l1, weights.bbox)), scale(gl, weights.giou))
        comps["l1"] = l1.item()
        comps["giou"] = gl.item()
    comps["total"] = total.item()
    return total, comps


# ---------------------------------------------------------------------------
# post-processing and evaluation


def nms_and_filter(logits, boxes, conf_threshold: float = 0.05, iou_threshold: float = 0.5) -> list:
    """Per-image detections ``(class, conf, box)`` after filtering and per-class greedy NMS.

    Queries whose argmax is background or whose confidence is below
    ``conf_threshold`` are dropped. Equal confidences keep the lower index.
    """
    logits = np.asarray(logits, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    prob = np.exp(log_softmax_np(logits))
    bg = logits.shape[-1] - 1
    cls = prob.argmax(axis=-1)
    conf = prob[np.arange(len(cls)), cls]
    keep = np.flatnonzero((cls != bg) & (conf >= conf_threshold) & (boxes[:, 2] > 0) & (boxes[:, 3] > 0))
    out = []
    for c in np.unique(cls[keep]):
        idx = keep[cls[keep] == c]
        idx = idx[np.argsort(-conf[idx], kind="stable")]
        kept = []
        for i in idx:
            if kept:
                ious, _ = pairwise_iou_giou(boxes[i], boxes[kept])
                if np.any(ious[0] > iou_threshold):
                    continue
            kept.append(i)
        out.extend((int(c), float(conf[i]), boxes[i].copy()) for i in kept)
    out.sort(key=lambda d: -d[1])
    return out


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under the precision-recall curve."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def map_at_50(detections, ground_truth, iou_threshold: float = 0.5):
    """Mean AP over classes present in the ground truth.

    ``detections[i]`` lists ``(class, conf, box)`` for image i and
    ``ground_truth[i]`` lists ``(class, box)``. Returns ``(mAP, {class: AP})``.
    """
    classes = sorted({int(c) for objs in ground_truth for c, _ in objs})
    per_class = {}
    for c in classes:
        gts = {i: [np.asarray(b) for cc, b in objs if int(cc) == c] for i, objs in enumerate(ground_truth)}
        n_gt = sum(len(v) for v in gts.values())
        dets = [(conf, i, np.asarray(b)) for i, ds in enumerate(detections) for cc, conf, b in ds if int(cc) == c]
        if not dets:
            per_class[c] = 0.0
            continue
        order = sorted(range(len(dets)), key=lambda k: -dets[k][0])
        used = {i: np.zeros(len(v), dtype=bool) for i, v in gts.items()}
        tp = np.zeros(len(dets))
        for rank, k in enumerate(order):
            _, i, b = dets[k]
            if not gts[i]:
                continue
            ious, _ = pairwise_iou_giou(b, np.array(gts[i]))
            j = int(np.argmax(ious[0]))
            if ious[0, j] >= iou_threshold and not used[i][j]:
                used[i][j] = True
                tp[rank] = 1.0
        ctp = np.cumsum(tp)
        cfp = np.cumsum(1.0 - tp)
        per_class[c] = average_precision(ctp / n_gt, ctp / (ctp + cfp))
    if not per_class:
        return 0.0, {}
    return float(np.mean(list(per_class.values()))), per_class


def write_detections_csv(path, detections) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "class", "conf", "cx", "cy", "w", "h"])
        for i, dets in enumerate(detections):
            for c, conf, b in dets:
                w.writerow([i, c, f"{conf:.6g}", *(f"{v:.6g}" for v in b)])
