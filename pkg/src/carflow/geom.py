"""Non-differentiable point-cloud kernels: sampling, K-NN and three-NN weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

THREE_NN_EPS = 1e-8


@dataclass
class PointCloud:
    coords: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or len(self.coords) < 1:
            raise ValueError(f"coords must be N x 3 with N >= 1, got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise ValueError("coords must be finite")
        if self.features is not None and len(self.features) != len(self.coords):
            raise ValueError("features and coords row counts differ")

    def __len__(self):
        return len(self.coords)


@dataclass
class NeighborIndex:
    """K-NN result. Padded slots (K larger than the source) carry distance inf."""
    indices: np.ndarray
    distances: np.ndarray

    @property
    def padded(self):
        return np.isinf(self.distances)


def _coords(x):
    if isinstance(x, PointCloud):
        return x.coords
    return np.asarray(x, dtype=np.float64)


def sq_dist(a, b):
    # explicit per-axis sum so every caller gets bitwise-identical values
    d = a - b
    return (d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]) + d[..., 2] * d[..., 2]


def farthest_point_sample(cloud, n_out, seed=0):
    """Greedy max-min sampling starting at ``seed mod N``; ties go to the lowest index."""
    xyz = _coords(cloud)
    n = len(xyz)
    if not 1 <= n_out <= n:
        raise ValueError(f"n_out={n_out} out of range [1, {n}]")
    out = np.empty(n_out, dtype=np.int64)
    cur = seed % n
    best = np.full(n, np.inf)
    for i in range(n_out):
        out[i] = cur
        best = np.minimum(best, sq_dist(xyz, xyz[cur]))
        cur = int(np.argmax(best))
    return out


def farthest_point_sample_batched(coords, n_out, seed=0):
    """:func:`farthest_point_sample` applied to every item of a ``(B, N, 3)`` batch."""
    xyz = np.asarray(coords, dtype=np.float64)
    B, n, _ = xyz.shape
    if not 1 <= n_out <= n:
        raise ValueError(f"n_out={n_out} out of range [1, {n}]")
    out = np.empty((B, n_out), dtype=np.int64)
    rows = np.arange(B)
    cur = np.full(B, seed % n)
    best = np.full((B, n), np.inf)
    for i in range(n_out):
        out[:, i] = cur
        best = np.minimum(best, sq_dist(xyz, xyz[rows, cur][:, None, :]))
        cur = np.argmax(best, axis=1)
    return out


def random_sample(cloud, n_out, seed=0):
    """Uniform sample without replacement, deterministic per seed."""
    n = len(_coords(cloud)) if not isinstance(cloud, int) else cloud
    if not 1 <= n_out <= n:
        raise ValueError(f"n_out={n_out} out of range [1, {n}]")
    rng = np.random.default_rng(seed)
    return rng.permutation(n)[:n_out].astype(np.int64)


def _sorted_topk(d2, k):
    """Indices of the k smallest entries per row, ordered by (distance, index)."""
    n = d2.shape[-1]
    if k >= n:
        return np.argsort(d2, axis=-1, kind="stable")
    part = np.argpartition(d2, k - 1, axis=-1)[..., :k]
    vals = np.take_along_axis(d2, part, axis=-1)
    kth = vals.max(axis=-1, keepdims=True)
    # ties straddling the cut would make the partition ambiguous
    clean = (d2 <= kth).sum(axis=-1) == k
    part = np.sort(part, axis=-1)
    order = np.argsort(np.take_along_axis(d2, part, axis=-1), axis=-1, kind="stable")
    out = np.take_along_axis(part, order, axis=-1)
    if not clean.all():
        bad = ~clean
        out[bad] = np.argsort(d2[bad], axis=-1, kind="stable")[..., :k]
    return out


def _finish(d2, order, k, n_src):
    """Take the first k of a sorted candidate order; pad with the nearest."""
    kk = min(k, n_src)
    idx = order[..., :kk]
    dist = np.sqrt(np.take_along_axis(d2, idx, axis=-1))
    if kk < k:
        pad = k - kk
        idx = np.concatenate([idx, np.repeat(idx[..., :1], pad, axis=-1)], axis=-1)
        dist = np.concatenate([dist, np.full(dist.shape[:-1] + (pad,), np.inf)], axis=-1)
    return idx, dist


def knn_brute(query, source, k, chunk=1 << 22):
    q, s = _coords(query), _coords(source)
    if len(s) == 0:
        raise ValueError("knn source is empty")
    if k < 1:
        raise ValueError("K must be >= 1")
    rows = max(1, chunk // max(len(s), 1))
    idx_parts, dist_parts = [], []
    for start in range(0, len(q), rows):
        d2 = sq_dist(q[start:start + rows, None, :], s[None, :, :])
        order = _sorted_topk(d2, min(k, len(s)))
        i, d = _finish(d2, order, k, len(s))
        idx_parts.append(i)
        dist_parts.append(d)
    return NeighborIndex(np.concatenate(idx_parts), np.concatenate(dist_parts))


class UniformGrid:
    """Bucket grid over a source cloud for exact K-NN queries."""

    def __init__(self, source, cell=None, per_cell=4):
        self.src = _coords(source)
        if len(self.src) == 0:
            raise ValueError("knn source is empty")
        lo, hi = self.src.min(0), self.src.max(0)
        span = np.maximum(hi - lo, 1e-9)
        if cell is None:
            vol = float(np.prod(span))
            cell = (vol * per_cell / len(self.src)) ** (1.0 / 3.0)
            cell = max(cell, float(span.max()) / 64.0, 1e-9)
        self.cell = cell
        self.lo = lo
        self.dims = np.floor(span / cell).astype(np.int64) + 1
        keys = self._keys(self._cells(self.src))
        order = np.argsort(keys, kind="stable")
        self.sorted_idx = order
        sk = keys[order]
        self.uniq, self.starts, self.counts = np.unique(sk, return_index=True, return_counts=True)

    def _cells(self, pts):
        c = np.floor((pts - self.lo) / self.cell).astype(np.int64)
        return np.clip(c, 0, self.dims - 1)

    def _keys(self, c):
        return (c[..., 0] * self.dims[1] + c[..., 1]) * self.dims[2] + c[..., 2]

    def _members(self, lo, hi):
        rng = [np.arange(lo[a], hi[a] + 1) for a in range(3)]
        cx, cy, cz = np.meshgrid(*rng, indexing="ij")
        keys = self._keys(np.stack([cx.ravel(), cy.ravel(), cz.ravel()], -1))
        pos = np.searchsorted(self.uniq, keys)
        pos = np.clip(pos, 0, len(self.uniq) - 1)
        hit = self.uniq[pos] == keys
        parts = [self.sorted_idx[self.starts[p]:self.starts[p] + self.counts[p]] for p in pos[hit]]
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    def query(self, query, k):
        q = _coords(query)
        n_src = len(self.src)
        kk = min(k, n_src)
        qcell = np.floor((q - self.lo) / self.cell).astype(np.int64)
        out_i = np.empty((len(q), kk), dtype=np.int64)
        out_d2 = np.empty((len(q), kk))
        max_r = int(self.dims.max()) + int(np.abs(qcell).max(initial=0)) + 2
        # rings smaller than a query's distance to the grid box hold nothing
        gap = np.maximum(np.maximum(-qcell, qcell - (self.dims - 1)), 0).max(axis=1)
        for qi in range(len(q)):
            r = int(gap[qi])
            while True:
                lo = np.maximum(qcell[qi] - r, 0)
                hi = np.minimum(qcell[qi] + r, self.dims - 1)
                if np.all(lo <= hi):
                    cand = self._members(lo, hi)
                else:
                    cand = np.empty(0, dtype=np.int64)
                covers_all = len(cand) == n_src
                if len(cand) >= kk:
                    cand = np.sort(cand)
                    d2 = sq_dist(q[qi], self.src[cand])
                    order = np.argsort(d2, kind="stable")[:kk]
                    # anything outside the searched block lies at least
                    # `reach` away from the query
                    inner = (q[qi] - self.lo) - (qcell[qi] - r) * self.cell
                    outer = (qcell[qi] + r + 1) * self.cell - (q[qi] - self.lo)
                    reach = min(inner.min(), outer.min())
                    if covers_all or r > max_r or d2[order[-1]] < reach * reach:
                        out_i[qi] = cand[order]
                        out_d2[qi] = d2[order]
                        break
                r += 1
        idx = out_i
        dist = np.sqrt(out_d2)
        if kk < k:
            pad = k - kk
            idx = np.concatenate([idx, np.repeat(idx[:, :1], pad, axis=1)], axis=1)
            dist = np.concatenate([dist, np.full((len(q), pad), np.inf)], axis=1)
        return NeighborIndex(idx, dist)


def knn_grid(query, source, k, cell=None):
    if k < 1:
        raise ValueError("K must be >= 1")
    return UniformGrid(source, cell=cell).query(query, k)


def knn(query, source, k, method="auto"):
    """Exact Euclidean K-NN of every query row in ``source``.

    Rows are sorted by distance with ties broken by the lower source index.
    ``method`` is ``"brute"``, ``"grid"`` or ``"auto"``; both paths return
    identical results.
    """
    s = _coords(source)
    if len(s) == 0:
        raise ValueError("knn source is empty")
    if method == "auto":
        method = "grid" if len(s) * len(_coords(query)) > 1 << 24 else "brute"
    if method == "brute":
        return knn_brute(query, source, k)
    if method == "grid":
        return knn_grid(query, source, k)
    raise ValueError(f"unknown knn method {method!r}")


def knn_batched(query, source, k):
    """Brute-force K-NN over a leading batch axis; returns (indices, distances)."""
    q = np.asarray(query, dtype=np.float64)
    s = np.asarray(source, dtype=np.float64)
    if s.shape[1] == 0:
        raise ValueError("knn source is empty")
    d2 = sq_dist(q[:, :, None, :], s[:, None, :, :])
    order = _sorted_topk(d2, min(k, s.shape[1]))
    return _finish(d2, order, k, s.shape[1])


def inverse_distance_weights(dist):
    """Normalized 1/(d+eps) weights along the last axis; inf distances weigh 0."""
    inv = np.where(np.isinf(dist), 0.0, 1.0 / (np.where(np.isinf(dist), 0.0, dist) + THREE_NN_EPS))
    return inv / inv.sum(axis=-1, keepdims=True)


def three_nn_weights(query, source):
    """Indices (N x 3) of the three nearest source points and their weights."""
    nb = knn(query, source, 3)
    return nb.indices, inverse_distance_weights(nb.distances)


def three_nn_weights_batched(query, source):
    idx, dist = knn_batched(query, source, 3)
    return idx, inverse_distance_weights(dist)
