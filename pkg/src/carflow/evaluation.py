"""Multi-scale training loss and scene-flow evaluation metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import Tensor, l2_norm_last_axis, mul, reduce_sum

METRIC_NAMES = ("epe3d", "acc3d_strict", "acc3d_relax", "outliers3d", "epe2d", "acc2d")
# denominator guard for relative errors, as in the common evaluation scripts
REL_EPS = 1e-4


class EmptyMaskError(ValueError):
    pass


@dataclass
class CameraIntrinsics:
    fx: float = 1050.0
    fy: float = 1050.0
    cx: float = 479.5
    cy: float = 269.5

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @classmethod
    def parse(cls, text):
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 4:
            raise ValueError("intrinsics need fx,fy,cx,cy")
        return cls(*vals)


@dataclass
class MetricsReport:
    epe3d: float
    acc3d_strict: float
    acc3d_relax: float
    outliers3d: float
    epe2d: float | None = None
    acc2d: float | None = None

    def to_dict(self):
        return asdict(self)

    def to_lines(self):
        return "\n".join(f"{k}={_fmt(v)}" for k, v in self.to_dict().items())

    def to_record(self):
        return json.dumps(self.to_dict(), separators=(",", ":"))


def _fmt(v):
    return "nan" if v is None else f"{v:.6f}"


def multiscale_loss(preds, gt_flow, level_indices, weights, mask=None):
    """Weighted sum over levels of the mean end-point error.

    ``preds`` are flow tensors ``(B, N_l, 3)``, ``level_indices`` the composed
    indices ``(B, N_l)`` into ``gt_flow`` (``(B, N, 3)``) and ``weights`` the
    per-level factors, all in the same level order.
    """
    if not (len(preds) == len(level_indices) == len(weights)):
        raise ValueError(f"got {len(preds)} levels, {len(level_indices)} index sets, {len(weights)} weights")
    gt_flow = np.asarray(gt_flow, dtype=np.float64)
    if gt_flow.ndim == 2:
        gt_flow = gt_flow[None]
    total = None
    for pred, idx, w in zip(preds, level_indices, weights):
        idx = np.asarray(idx)
        if idx.ndim == 1:
            idx = idx[None]
        b = np.arange(idx.shape[0])[:, None]
        gt = gt_flow[b, idx]
        err = l2_norm_last_axis(pred - Tensor(gt, dtype=pred.dtype), keepdims=False)   # B, N_l
        if mask is None:
            term = mul(reduce_sum(err), w / err.data.size)
        else:
            m = np.asarray(mask, dtype=bool)
            if m.ndim == 1:
                m = m[None]
            m = m[b, idx].astype(err.dtype)
            if m.sum() == 0:
                raise EmptyMaskError("no valid points at a supervised level")
            term = mul(reduce_sum(err * m), w / m.sum())
        total = term if total is None else total + term
    return total


def _mask(mask, n):
    if mask is None:
        return np.ones(n, dtype=bool)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if not m.any():
        raise EmptyMaskError("mask selects no points")
    return m


def metrics_3d(pred, gt, mask=None):
    """Return ``(epe3d, acc3d_strict, acc3d_relax, outliers3d)`` over masked points."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    m = _mask(mask, len(gt))
    err = np.linalg.norm(pred[m] - gt[m], axis=-1)
    rel = err / (np.linalg.norm(gt[m], axis=-1) + REL_EPS)
    strict = np.logical_or(err < 0.05, rel < 0.05).mean()
    relax = np.logical_or(err < 0.1, rel < 0.1).mean()
    outliers = np.logical_or(err > 0.3, rel > 0.1).mean()
    return float(err.mean()), float(strict), float(relax), float(outliers)


def project(points, intr: CameraIntrinsics):
    p = np.asarray(points, dtype=np.float64)
    return np.stack([intr.fx * p[:, 0] / p[:, 2] + intr.cx,
                     intr.fy * p[:, 1] / p[:, 2] + intr.cy], axis=-1)


def metrics_2d(pc1, pred, gt, intrinsics=None, mask=None, return_excluded=False):
    """Return ``(epe2d, acc2d)`` of the optical flow induced by projecting the 3D flows.

    Points with non-positive depth before or after either displacement are
    excluded; ``return_excluded`` appends their count.
    """
    intr = intrinsics or CameraIntrinsics()
    pc1 = np.asarray(pc1, dtype=np.float64).reshape(-1, 3)
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    m = _mask(mask, len(pc1))
    front = (pc1[:, 2] > 0) & ((pc1 + pred)[:, 2] > 0) & ((pc1 + gt)[:, 2] > 0)
    keep = m & front
    if not keep.any():
        raise EmptyMaskError("all points lie behind the camera")
    base = project(pc1[keep], intr)
    of_pred = project(pc1[keep] + pred[keep], intr) - base
    of_gt = project(pc1[keep] + gt[keep], intr) - base
    err = np.linalg.norm(of_pred - of_gt, axis=-1)
    rel = err / (np.linalg.norm(of_gt, axis=-1) + REL_EPS)
    acc = np.logical_or(err < 3.0, rel < 0.05).mean()
    out = (float(err.mean()), float(acc))
    if return_excluded:
        return out + (int((m & ~front).sum()),)
    return out


class MetricsAccumulator:
    """Point-weighted aggregation of per-scene metrics in insertion order."""

    def __init__(self, intrinsics=None, with_2d=True):
        self.intrinsics = intrinsics
        self.with_2d = with_2d
        self.sums = dict.fromkeys(METRIC_NAMES, 0.0)
        self.n3 = 0
        self.n2 = 0
        self.records = []

    def add(self, pc1, pred, gt, mask=None, name=None):
        pred = np.asarray(pred).reshape(-1, 3)
        n = int(_mask(mask, len(pred)).sum())
        e, s, r, o = metrics_3d(pred, gt, mask)
        rec = {"scene": name, "epe3d": e, "acc3d_strict": s, "acc3d_relax": r, "outliers3d": o}
        for k in ("epe3d", "acc3d_strict", "acc3d_relax", "outliers3d"):
            self.sums[k] += rec[k] * n
        self.n3 += n
        if self.with_2d:
            try:
                e2, a2, excl = metrics_2d(pc1, pred, gt, self.intrinsics, mask, return_excluded=True)
            except EmptyMaskError:
                e2 = a2 = None
                excl = n
            n2 = n - excl
            if e2 is not None:
                self.sums["epe2d"] += e2 * n2
                self.sums["acc2d"] += a2 * n2
                self.n2 += n2
            rec.update(epe2d=e2, acc2d=a2)
        self.records.append(rec)
        return rec

    def report(self):
        if self.n3 == 0:
            raise EmptyMaskError("no scenes evaluated")
        kw = {k: self.sums[k] / self.n3 for k in METRIC_NAMES[:4]}
        if self.n2:
            kw.update(epe2d=self.sums["epe2d"] / self.n2, acc2d=self.sums["acc2d"] / self.n2)
        return MetricsReport(**kw)
