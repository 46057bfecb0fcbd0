"""Deterministic desk-scale data: Gaussian blobs, MNIST IDX files, toy shapes."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_MEAN = 0.1307
MNIST_STD = 0.3081

SHAPE_CLASSES = ("disk", "square", "triangle")


class FormatError(ValueError):
    pass


def make_blobs(n_classes: int, n_per_class: int, dim: int, spread: float, seed: int):
    """Isotropic clusters around centers drawn once from 3 * N(0, I).

    Returns ``(X, y)`` with rows shuffled under ``seed``.
    """
    if n_classes < 2 or dim < 2 or n_per_class < 0 or not spread > 0:
        raise ValueError(f"invalid blob sizes: n_classes={n_classes}, dim={dim}, n_per_class={n_per_class}, spread={spread}")
    rng = np.random.default_rng(seed)
    centers = 3.0 * rng.standard_normal((n_classes, dim))
    y = np.repeat(np.arange(n_classes), n_per_class)
    X = centers[y] + spread * rng.standard_normal((y.size, dim))
    order = rng.permutation(y.size)
    return X[order], y[order]


def standardize(X: np.ndarray, dataset: str) -> np.ndarray:
    if dataset == "mnist":
        return (X - MNIST_MEAN) / MNIST_STD
    return X


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{what}: truncated header ({len(raw)} bytes)")
    (actual,) = struct.unpack(">I", raw[:4])
    if actual != magic:
        raise FormatError(f"{what}: bad magic 0x{actual:08x}, expected 0x{magic:08x}")
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{what}: truncated header ({len(raw)} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    need = int(np.prod(dims))
    body = raw[4 + 4 * ndim:]
    if len(body) < need:
        raise FormatError(f"{what}: truncated, header promises {need} bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)


def load_mnist_idx(images_path, labels_path, limit: int | None = None):
    """Images as [N, 1, 28, 28] floats in [0, 1] and integer labels.

    Plain or gzip-compressed files are accepted. ``limit`` keeps the first
    ``limit`` samples.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    X = images.astype(np.float64)[:, None, :, :] / 255.0
    return X, labels.astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 data as IDX (3-d arrays as images, 1-d as labels)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}.get(array.ndim)
    if magic is None:
        raise ValueError("IDX writer supports 1-d labels or 3-d images")
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def find_mnist(directory, split: str = "train"):
    """Locate the standard IDX file pair for ``split`` under ``directory``."""
    prefix = "train" if split == "train" else "t10k"
    d = Path(directory)
    for suffix in ("", ".gz"):
        img = d / f"{prefix}-images-idx3-ubyte{suffix}"
        lab = d / f"{prefix}-labels-idx1-ubyte{suffix}"
        if img.exists() and lab.exists():
            return img, lab
    raise FileNotFoundError(f"no {prefix} IDX files in {d}")


# ---------------------------------------------------------------------------
# toy detection scenes


@dataclass
class DetectionInstance:
    image: np.ndarray  # [1, H, W]
    targets: list  # (class_id, box) with box = (cx, cy, w, h) in [0, 1]
    shapes: list = field(default_factory=list)  # (kind, cx_px, cy_px, r_px)


def rasterize(kind: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    """Boolean mask sampled at pixel centres."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "disk":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == "square":
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    if kind == "triangle":
        # apex at top, base at the bottom
        top, bottom = cy - r, cy + r
        frac = (yy - top) / (2 * r)
        half = r * frac
        return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)
    raise ValueError(f"unknown shape {kind!r}")


def mask_box(mask: np.ndarray) -> np.ndarray:
    """Tight (cx, cy, w, h) box of a mask, normalized by the image side."""
    size = mask.shape[0]
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    x1, x2 = cols[0] / size, (cols[-1] + 1) / size
    y1, y2 = rows[0] / size, (rows[-1] + 1) / size
    return np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1])


def box_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def make_shapes(n_images: int, max_objects: int, classes=SHAPE_CLASSES, seed: int = 0,
                size: int = 64, M: int = 8, r_range=(5.0, 10.0), max_overlap: float = 0.3):
    """Noisy-background scenes with 1..max_objects shapes and tight boxes.

    Boxes overlapping an earlier box by IoU > ``max_overlap`` are redrawn.
    """
    if n_images < 0 or max_objects < 1:
        raise ValueError("n_images must be >= 0 and max_objects >= 1")
    if max_objects > M:
        raise ValueError(f"max_objects={max_objects} exceeds the query count {M}")
    classes = tuple(classes)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_images):
        image = np.clip(0.1 + 0.05 * rng.standard_normal((size, size)), 0.0, 1.0)
        n = int(rng.integers(1, max_objects + 1))
        targets, shapes = [], []
        while len(targets) < n:
            kind_id = int(rng.integers(len(classes)))
            r = float(rng.uniform(*r_range))
            cx, cy = (float(v) for v in rng.uniform(r + 1, size - r - 1, size=2))
            mask = rasterize(classes[kind_id], cx, cy, r, size)
            if not mask.any():
                continue
            box = mask_box(mask)
            if any(box_iou(box, b) > max_overlap for _, b in targets):
                continue
            image[mask] = float(rng.uniform(0.7, 1.0))
            targets.append((kind_id, box))
            shapes.append((classes[kind_id], cx, cy, r))
        out.append(DetectionInstance(image[None].copy(), targets, shapes))
    return out
