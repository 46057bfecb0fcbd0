import gzip

import numpy as np
import pytest

from _oracles import logistic_regression_accuracy
from dfm.datasets import (
    IDX_IMAGES_MAGIC,
    FormatError,
    find_mnist,
    load_mnist_idx,
    make_blobs,
    make_shapes,
    mask_box,
    rasterize,
    standardize,
    write_idx,
)


def _write_pair(tmp_path, n=5, seed=0, suffix=""):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    img, lab = tmp_path / "train-images-idx3-ubyte", tmp_path / "train-labels-idx1-ubyte"
    write_idx(img, images)
    write_idx(lab, labels)
    if suffix == ".gz":
        for p in (img, lab):
            p.with_name(p.name + ".gz").write_bytes(gzip.compress(p.read_bytes()))
            p.unlink()
        img, lab = img.with_name(img.name + ".gz"), lab.with_name(lab.name + ".gz")
    return img, lab, images, labels


def test_blobs_deterministic_and_shaped():
    X1, y1 = make_blobs(3, 50, 8, 0.5, seed=4)
    X2, y2 = make_blobs(3, 50, 8, 0.5, seed=4)
    assert X1.tobytes() == X2.tobytes() and y1.tobytes() == y2.tobytes()
    assert X1.shape == (150, 8) and set(y1) == {0, 1, 2}
    X3, _ = make_blobs(3, 50, 8, 0.5, seed=5)
    assert not np.array_equal(X1, X3)


def test_blobs_tiny_spread_points_sit_on_centers():
    X, y = make_blobs(3, 20, 4, 1e-12, seed=1)
    for c in range(3):
        pts = X[y == c]
        assert np.allclose(pts, pts[0], atol=1e-9)
    # 1-NN on the cluster centers is perfect
    centers = np.stack([X[y == c][0] for c in range(3)])
    pred = np.argmin(((X[:, None] - centers[None]) ** 2).sum(-1), axis=1)
    assert np.array_equal(pred, y)


def test_blobs_linearly_separable_by_logistic_oracle():
    X, y = make_blobs(3, 200, 8, 0.5, seed=0)
    n = 400
    assert logistic_regression_accuracy(X[:n], y[:n], X[n:], y[n:], 3) > 0.95


@pytest.mark.parametrize("args", [(1, 10, 8, 0.5), (3, 10, 1, 0.5), (3, 10, 8, 0.0), (3, -1, 8, 0.5)])
def test_blobs_invalid_sizes(args):
    with pytest.raises(ValueError):
        make_blobs(*args, seed=0)


def test_standardize_constants():
    X = np.array([0.1307, 0.1307 + 0.3081])
    assert np.allclose(standardize(X, "mnist"), [0.0, 1.0])
    assert standardize(X, "blobs") is X


@pytest.mark.parametrize("suffix", ["", ".gz"])
def test_idx_roundtrip(tmp_path, suffix):
    img, lab, images, labels = _write_pair(tmp_path, suffix=suffix)
    X, y = load_mnist_idx(img, lab)
    assert X.shape == (5, 1, 28, 28)
    assert np.array_equal((X[:, 0] * 255).round().astype(np.uint8), images)
    assert np.array_equal(y, labels)
    assert find_mnist(tmp_path, "train") == (img, lab)


def test_idx_header_matches_independent_hex_read(tmp_path):
    img, lab, images, labels = _write_pair(tmp_path, n=3)
    raw = img.read_bytes()
    assert raw[:4].hex() == "00000803"
    assert [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(3)] == [3, 28, 28]
    raw_l = lab.read_bytes()
    assert raw_l[:4].hex() == "00000801"
    assert int.from_bytes(raw_l[4:8], "big") == 3
    _, y = load_mnist_idx(img, lab)
    assert y[0] == raw_l[8]


def test_idx_pixel_endpoints_and_limit(tmp_path):
    images = np.zeros((2, 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    write_idx(tmp_path / "i", images)
    write_idx(tmp_path / "l", np.array([7, 2], dtype=np.uint8))
    X, y = load_mnist_idx(tmp_path / "i", tmp_path / "l")
    assert X[0, 0, 0, 0] == 1.0 and X[1].max() == 0.0
    X0, y0 = load_mnist_idx(tmp_path / "i", tmp_path / "l", limit=0)
    assert len(X0) == 0 and len(y0) == 0
    X1, y1 = load_mnist_idx(tmp_path / "i", tmp_path / "l", limit=1)
    assert list(y1) == [7]


def test_idx_bad_magic_names_both(tmp_path):
    img, lab, _, _ = _write_pair(tmp_path)
    with pytest.raises(FormatError, match=r"0x00000801.*0x00000803"):
        load_mnist_idx(lab, lab)
    assert IDX_IMAGES_MAGIC == 0x803


def test_idx_truncated(tmp_path):
    img, lab, _, _ = _write_pair(tmp_path)
    img.write_bytes(img.read_bytes()[:-10])
    with pytest.raises(FormatError, match="truncated"):
        load_mnist_idx(img, lab)
    img.write_bytes(b"\x00\x00")
    with pytest.raises(FormatError):
        load_mnist_idx(img, lab)


def test_find_mnist_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        find_mnist(tmp_path, "test")


def test_centered_disk_box_is_tight():
    mask = rasterize("disk", 32.0, 32.0, 8.0, 64)
    box = mask_box(mask)
    assert np.allclose(box, [0.5, 0.5, 0.25, 0.25], atol=1 / 64 + 1e-12)
    rows = np.where(mask.any(axis=1))[0]
    cols = np.where(mask.any(axis=0))[0]
    assert box[2] * 64 == cols.max() - cols.min() + 1
    assert box[3] * 64 == rows.max() - rows.min() + 1


def test_shapes_boxes_equal_mask_extents():
    scenes = make_shapes(40, 3, seed=2)
    for scene in scenes:
        assert 1 <= len(scene.targets) <= 3
        assert scene.image.shape == (1, 64, 64)
        for (c, box), (kind, cx, cy, r) in zip(scene.targets, scene.shapes):
            mask = rasterize(kind, cx, cy, r, 64)
            ys, xs = np.nonzero(mask)
            x1, x2, y1, y2 = xs.min() / 64, (xs.max() + 1) / 64, ys.min() / 64, (ys.max() + 1) / 64
            assert np.allclose(box, [(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], atol=1e-15)
            assert box[2] > 0 and box[3] > 0
            assert 0 <= box[0] - box[2] / 2 and box[0] + box[2] / 2 <= 1
            assert 0 <= c < 3


def test_shapes_overlap_bounded_and_deterministic():
    from dfm.detection import iou

    a, b = make_shapes(30, 4, seed=9), make_shapes(30, 4, seed=9)
    for s, t in zip(a, b):
        assert s.image.tobytes() == t.image.tobytes()
        boxes = [box for _, box in s.targets]
        for i in range(len(boxes)):
            for j in range(i):
                assert iou(boxes[i], boxes[j]) <= 0.3


def test_shapes_edge_cases():
    assert make_shapes(0, 3) == []
    with pytest.raises(ValueError):
        make_shapes(2, 9, M=8)
    with pytest.raises(ValueError):
        rasterize("hexagon", 5, 5, 2, 16)
