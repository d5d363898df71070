"""Hot numeric kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``TRAJFLOW_NUMBA`` is not
``0``. Both paths compute the same quantities; ``tests/test_kernels.py``
checks them against each other and ``benchmarks/bench_kernels.py`` times
them.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


_BACKEND = "numba" if HAVE_NUMBA and os.environ.get("TRAJFLOW_NUMBA", "1") != "0" else "numpy"


def backend() -> str:
    return _BACKEND


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(name)
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _BACKEND = name


# ---------------------------------------------------------------------------
# unit-amplitude squared-exponential correlation
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _rbf_cross_nb(a, b, ux, uy):
    n = a.shape[0]
    m = b.shape[0]
    out = np.empty((n, m))
    cx = 0.5 / (ux * ux)
    cy = 0.5 / (uy * uy)
    for i in range(n):
        ax = a[i, 0]
        ay = a[i, 1]
        for j in range(m):
            dx = ax - b[j, 0]
            dy = ay - b[j, 1]
            out[i, j] = np.exp(-(dx * dx * cx + dy * dy * cy))
    return out


def _rbf_cross_np(a, b, ux, uy):
    dx = (a[:, None, 0] - b[None, :, 0]) / ux
    dy = (a[:, None, 1] - b[None, :, 1]) / uy
    return np.exp(-0.5 * (dx * dx + dy * dy))


def rbf_cross(a: np.ndarray, b: np.ndarray, ux: float, uy: float) -> np.ndarray:
    """exp(-dx^2/(2 ux^2) - dy^2/(2 uy^2)) for every pair of rows of ``a`` and ``b``."""
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 2)
    if _BACKEND == "numba":
        return _rbf_cross_nb(a, b, float(ux), float(uy))
    return _rbf_cross_np(a, b, ux, uy)


# ---------------------------------------------------------------------------
# epsilon-neighbourhood support: distinct owners within eps of each query
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _support_counts_nb(q, pts, owner, n_owner, eps):
    nq = q.shape[0]
    out = np.zeros(nq, dtype=np.int64)
    seen = np.full(n_owner, -1, dtype=np.int64)
    e2 = eps * eps
    for i in range(nq):
        qx = q[i, 0]
        qy = q[i, 1]
        c = 0
        for j in range(pts.shape[0]):
            o = owner[j]
            if seen[o] == i:
                continue
            dx = pts[j, 0] - qx
            dy = pts[j, 1] - qy
            if dx * dx + dy * dy <= e2:
                seen[o] = i
                c += 1
        out[i] = c
    return out


def _support_counts_np(q, pts, owner, n_owner, eps):
    if len(pts) == 0 or len(q) == 0:
        return np.zeros(len(q), dtype=np.int64)
    d2 = ((q[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    near = (d2 <= eps * eps).astype(np.float64)
    onehot = np.zeros((len(pts), n_owner))
    onehot[np.arange(len(pts)), owner] = 1.0
    return ((near @ onehot) > 0).sum(axis=1).astype(np.int64)


def support_counts(q: np.ndarray, pts: np.ndarray, owner: np.ndarray, n_owner: int,
                   eps: float) -> np.ndarray:
    """Number of distinct owners with at least one point in the closed eps-disc of each query."""
    q = np.ascontiguousarray(q, dtype=np.float64).reshape(-1, 2)
    pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 2)
    owner = np.ascontiguousarray(owner, dtype=np.int64)
    if _BACKEND == "numba":
        return _support_counts_nb(q, pts, owner, int(n_owner), float(eps))
    return _support_counts_np(q, pts, owner, int(n_owner), float(eps))


# ---------------------------------------------------------------------------
# DBSCAN labelling
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _dbscan_nb(pts, eps, min_pts):
    n = pts.shape[0]
    e2 = eps * eps
    nbr_count = np.zeros(n, dtype=np.int64)
    adj = np.zeros((n, n), dtype=np.bool_)
    for i in range(n):
        for j in range(n):
            dx = pts[i, 0] - pts[j, 0]
            dy = pts[i, 1] - pts[j, 1]
            if dx * dx + dy * dy <= e2:
                adj[i, j] = True
                nbr_count[i] += 1
    labels = np.full(n, -1, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or nbr_count[i] < min_pts:
            continue
        labels[i] = cluster
        top = 0
        stack[top] = i
        top += 1
        while top > 0:
            top -= 1
            p = stack[top]
            if nbr_count[p] < min_pts:
                continue
            for j in range(n):
                if adj[p, j] and labels[j] == -1:
                    labels[j] = cluster
                    stack[top] = j
                    top += 1
        cluster += 1
    return labels


def _dbscan_np(pts, eps, min_pts):
    n = len(pts)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    adj = d2 <= eps * eps
    core = adj.sum(axis=1) >= min_pts
    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        stack = [i]
        while stack:
            p = stack.pop()
            if not core[p]:
                continue
            fresh = np.flatnonzero(adj[p] & (labels == -1))
            labels[fresh] = cluster
            stack.extend(fresh.tolist())
        cluster += 1
    return labels


def dbscan_labels(pts: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Cluster label per point (``-1`` = noise). Border points go to the first cluster reaching them."""
    pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    if _BACKEND == "numba":
        return _dbscan_nb(pts, float(eps), int(min_pts))
    return _dbscan_np(pts, float(eps), int(min_pts))
