"""Pure-numpy versions of the compiled kernels, bit-identical in output."""
import numpy as np

_BLOCK = 256


def _sq_dist_block(a, b):
    diff = a[:, None, 0] - b[None, :, 0]
    acc = diff * diff
    for c in range(1, a.shape[1]):
        diff = a[:, None, c] - b[None, :, c]
        acc = acc + diff * diff
    return acc


def pairwise_sq_dist(a, b):
    out = np.empty((a.shape[0], b.shape[0]))
    for s in range(0, a.shape[0], _BLOCK):
        out[s:s + _BLOCK] = _sq_dist_block(a[s:s + _BLOCK], b)
    return out


def knn(query, ref, k):
    idx = np.empty((query.shape[0], k), dtype=np.int64)
    for s in range(0, query.shape[0], _BLOCK):
        d = _sq_dist_block(query[s:s + _BLOCK], ref)
        idx[s:s + _BLOCK] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return idx


def fps(points, m):
    n = points.shape[0]
    chosen = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = 0
    for s in range(m):
        chosen[s] = cur
        mind[cur] = -1.0
        if s == m - 1:
            break
        live = mind >= 0.0
        diff = points[:, 0] - points[cur, 0]
        acc = diff * diff
        for c in range(1, points.shape[1]):
            diff = points[:, c] - points[cur, c]
            acc = acc + diff * diff
        mind = np.where(live, np.minimum(mind, acc), mind)
        cur = int(np.argmax(mind))
    return chosen


def nearest(a, b):
    idx = np.empty(a.shape[0], dtype=np.int64)
    dist = np.empty(a.shape[0])
    for s in range(0, a.shape[0], _BLOCK):
        d = _sq_dist_block(a[s:s + _BLOCK], b)
        j = np.argmin(d, axis=1)
        idx[s:s + _BLOCK] = j
        dist[s:s + _BLOCK] = d[np.arange(d.shape[0]), j]
    return idx, dist
