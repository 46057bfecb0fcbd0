"""Representation geometry: PCA intrinsic dimension and feature spread."""

from __future__ import annotations

import csv
import warnings

import numpy as np


def jacobi_eigenvalues(A, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.

    Sweeps stop once the off-diagonal Frobenius norm is at most ``tol``
    times the full norm (or below ``tol`` absolutely for tiny matrices).
    """
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"need a square matrix, got {A.shape}")
    if not np.allclose(A, A.T, atol=1e-12 * max(1.0, np.abs(A).max(initial=0.0))):
        raise ValueError("matrix is not symmetric")
    A = (A + A.T) / 2
    n = A.shape[0]
    scale = max(np.linalg.norm(A), 1e-300)
    mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(A[mask] ** 2))
        if off <= tol * scale or off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                diff = A[q, q] - A[p, p]
                if abs(apq) < 1e-18 * abs(diff):
                    t = apq / diff  # theta too large to square
                else:
                    theta = diff / (2.0 * apq)
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows/columns p and q
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                rp = A[p, :].copy()
                rq = A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                A[p, q] = A[q, p] = 0.0
    return np.sort(np.diag(A))[::-1]


def intrinsic_dimension(F, threshold: float = 0.90) -> int:
    """Smallest k whose top-k covariance eigenvalues reach ``threshold`` of the variance."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 2:
        raise ValueError(f"need a feature matrix [N >= 2, d], got {F.shape}")
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    if not np.all(np.isfinite(F)):
        raise ValueError("features contain non-finite values")
    C = F - F.mean(axis=0)
    cov = C.T @ C / (F.shape[0] - 1)
    ev = np.clip(jacobi_eigenvalues(cov), 0.0, None)
    total = ev.sum()
    if total <= 0:
        warnings.warn("features have zero variance; intrinsic dimension is 0", RuntimeWarning, stacklevel=2)
        return 0
    frac = np.cumsum(ev) / total
    return int(np.searchsorted(frac, threshold - 1e-12) + 1)


def feature_spread(F, max_pairs: int = 10000, seed: int = 0, return_skipped: bool = False):
    """Mean (1 - cos) over unordered row pairs; zero rows are skipped.

    All pairs are used when there are at most ``max_pairs``; otherwise
    ``max_pairs`` pairs are drawn uniformly with ``seed``.
    """
    F = np.asarray(F, dtype=np.float64)
    norms = np.linalg.norm(F, axis=1)
    keep = norms > 0
    skipped = int((~keep).sum())
    U = F[keep] / norms[keep, None]
    n = U.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 nonzero rows, got {n}")
    n_pairs = n * (n - 1) // 2
    if n_pairs <= max_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, size=max_pairs)
        j = rng.integers(0, n - 1, size=max_pairs)
        j = j + (j >= i)  # uniform over j != i
    cos = np.clip(np.einsum("ij,ij->i", U[i], U[j]), -1.0, 1.0)
    value = float(np.mean(1.0 - cos))
    return (value, skipped) if return_skipped else value


def write_metrics_csv(path, run_id: str, metrics: dict, append: bool = False) -> None:
    exists = append and _nonempty(path)
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not exists:
            w.writerow(["run_id", "metric", "value"])
        for k, v in metrics.items():
            w.writerow([run_id, k, v if isinstance(v, (int, np.integer)) else repr(float(v))])


def _nonempty(path) -> bool:
    try:
        with open(path) as fh:
            return bool(fh.read(1))
    except OSError:
        return False
