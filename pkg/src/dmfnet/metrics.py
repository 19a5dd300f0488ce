"""Chamfer distances, F-Score, and the three-stage training loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dmfnet import diffarray as da
from dmfnet import geometry
from dmfnet.errors import ShapeError

DEFAULT_TAU = 0.01


def exact_mean(x):
    """Mean of a 1-d tensor with correctly rounded summation (order independent)."""
    x = da.as_tensor(x)
    n = x.shape[0]

    def fwd(a):
        return np.array(math.fsum(a) / n)

    return da._record("exact_mean", (x,), fwd(x.data), lambda g: (np.full(x.shape, g / n),), fwd)


def _check(y, ygt):
    y, ygt = da.as_tensor(y), da.as_tensor(ygt)
    for name, t in (("prediction", y), ("ground truth", ygt)):
        if t.ndim != 2 or t.shape[0] == 0:
            raise ShapeError(f"{name} must be a non-empty point set, got shape {t.shape}")
    if y.shape[1] != ygt.shape[1]:
        raise ShapeError(f"point dimension mismatch: {y.shape} vs {ygt.shape}")
    return y, ygt


def _chamfer(y, ygt, dist):
    y, ygt = _check(y, ygt)
    fwd_idx, _ = geometry.nearest(y.data, ygt.data)
    bwd_idx, _ = geometry.nearest(ygt.data, y.data)
    a = exact_mean(dist(da.sub(y, da.take(ygt, fwd_idx))))
    b = exact_mean(dist(da.sub(ygt, da.take(y, bwd_idx))))
    return da.scale(da.add(a, b), 0.5)


def cd_l1(y, ygt):
    """Symmetric mean nearest-neighbor Euclidean distance, each half weighted 1/2."""
    return _chamfer(y, ygt, da.row_norm)


def cd_l2(y, ygt):
    """As :func:`cd_l1` with squared distances."""
    return _chamfer(y, ygt, da.sq_norm)


def f_score(y, ygt, tau=DEFAULT_TAU):
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    y, ygt = _check(y, ygt)
    _, d_fwd = geometry.nearest(y.data, ygt.data)
    _, d_bwd = geometry.nearest(ygt.data, y.data)
    precision = float(np.mean(np.sqrt(d_fwd) < tau))
    recall = float(np.mean(np.sqrt(d_bwd) < tau))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class GroundTruthPyramid:
    y0: np.ndarray
    y1: np.ndarray
    ygt: np.ndarray


def build_pyramid(ygt, n0_concat, n1):
    """FPS-downsampled targets for the coarse and intermediate stages.

    One FPS sequence is computed at ``n1`` and ``y0`` is its prefix, so y0 is a
    subset of y1 which is a subset of ``ygt``.
    """
    ygt = np.asarray(ygt.data if isinstance(ygt, da.Tensor) else ygt, dtype=np.float64)
    if not 1 <= n0_concat <= n1 <= ygt.shape[0]:
        raise ValueError(f"need 1 <= n0_concat <= n1 <= N, got {n0_concat}, {n1}, {ygt.shape[0]}")
    seq = geometry.fps(ygt, n1)
    return GroundTruthPyramid(ygt[seq[:n0_concat]], ygt[seq], ygt)


@dataclass
class LossReport:
    cd_coarse: da.Tensor
    cd_intermediate: da.Tensor
    cd_final: da.Tensor
    total: da.Tensor

    def values(self):
        return {k: float(getattr(self, k).data) for k in
                ("cd_coarse", "cd_intermediate", "cd_final", "total")}


def total_loss(p0_concat, p1, pc, pyr: GroundTruthPyramid):
    p0_concat, p1, pc = (da.as_tensor(t) for t in (p0_concat, p1, pc))
    if p0_concat.shape[0] != pyr.y0.shape[0]:
        raise ShapeError(f"coarse resolution {p0_concat.shape[0]} != target {pyr.y0.shape[0]}")
    if p1.shape[0] != pyr.y1.shape[0]:
        raise ShapeError(f"intermediate resolution {p1.shape[0]} != target {pyr.y1.shape[0]}")
    a = cd_l1(p0_concat, pyr.y0)
    b = cd_l1(p1, pyr.y1)
    c = cd_l1(pc, pyr.ygt)
    return LossReport(a, b, c, da.add(da.add(a, b), c))
