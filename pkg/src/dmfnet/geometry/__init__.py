"""Deterministic point-set kernels: distances, k-nearest neighbors, farthest point sampling.

The compiled extension is used when it was built; otherwise the numpy
fallback is selected at import. Set ``DMFNET_BACKEND=python`` to force the
fallback. Both backends return identical bits.
"""
import os

import numpy as np

from dmfnet import diffarray as da
from dmfnet.errors import ShapeError
from dmfnet.geometry import _fallback

try:
    from dmfnet.geometry import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

if _compiled is not None and os.environ.get("DMFNET_BACKEND", "").lower() != "python":
    _impl = _compiled
    BACKEND = "cython"
else:
    _impl = _fallback
    BACKEND = "python"


def backends():
    """Available kernel implementations keyed by name."""
    out = {"python": _fallback}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def _coords(x, name):
    arr = x.data if isinstance(x, da.Tensor) else x
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-d array, got shape {arr.shape}")
    return arr


def pairwise_sq_dist(a, b):
    a, b = _coords(a, "a"), _coords(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return _impl.pairwise_sq_dist(a, b)


def knn(query, ref, k):
    """Indices of the ``k`` nearest rows of ``ref`` for every row of ``query``.

    Rows are sorted by ascending squared distance, ties broken by the smaller
    index. A query that is also in ``ref`` finds itself first.
    """
    query, ref = _coords(query, "query"), _coords(ref, "ref")
    if query.shape[1] != ref.shape[1]:
        raise ShapeError(f"dimension mismatch: {query.shape} vs {ref.shape}")
    if not 1 <= k <= ref.shape[0]:
        raise ValueError(f"k={k} out of range for {ref.shape[0]} reference points")
    return _impl.knn(query, ref, int(k))


def fps(points, m):
    """Greedy farthest point sampling seeded at index 0; indices in selection order."""
    points = _coords(points, "points")
    if not 1 <= m <= points.shape[0]:
        raise ValueError(f"m={m} out of range for {points.shape[0]} points")
    return _impl.fps(points, int(m))


def nearest(a, b):
    """For each row of ``a``: index of its nearest row in ``b`` and the squared distance."""
    a, b = _coords(a, "a"), _coords(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return _impl.nearest(a, b)


def gather_neighbors(values, nbr):
    """out[i, j] = values[nbr[i, j]]; differentiable in ``values``."""
    values = da.as_tensor(values)
    nbr = np.asarray(nbr)
    if nbr.size and (nbr.min() < 0 or nbr.max() >= values.shape[0]):
        raise IndexError(f"neighbor index out of range [0, {values.shape[0]})")
    return da.take(values, nbr)
