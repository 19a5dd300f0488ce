"""Coarse decoder: global feature -> sparse coarse cloud, then seed merging."""
from __future__ import annotations

import numpy as np

from dmfnet import diffarray as da
from dmfnet import geometry
from dmfnet.errors import ShapeError
from dmfnet.params import declare_mlp, mlp


def declare_generator(params, cfg, prefix="gen"):
    c, ce = cfg.channels, cfg.expand_width
    params.add(f"{prefix}.expand.weight", (c, cfg.n0 * ce), fan_in=c)
    params.add(f"{prefix}.expand.bias", (ce,), fan_in=c)
    for b in range(2):
        declare_mlp(params, f"{prefix}.res{b}", [ce + c, c, ce + c])
    declare_mlp(params, f"{prefix}.head", [ce + c, cfg.head_hidden, 3])


def generate_coarse(fused, params, cfg, prefix="gen"):
    fused = da.as_tensor(fused)
    if fused.shape != (1, cfg.channels):
        raise ShapeError(f"fused feature must be 1x{cfg.channels}, got {fused.shape}")
    x = da.transpose_conv1d(fused, cfg.n0, params[f"{prefix}.expand.weight"],
                            params[f"{prefix}.expand.bias"])
    x = da.concat([x, da.replicate(fused, cfg.n0)], axis=1)
    for b in range(2):
        x = da.add(x, mlp(x, params, f"{prefix}.res{b}"))
    return mlp(x, params, f"{prefix}.head")


def seed_merge(p0, partial, n0):
    """[P_0 rows; FPS(partial, n0) rows]."""
    if n0 < 1:
        raise ValueError("n0 must be >= 1")
    partial = np.asarray(partial.data if isinstance(partial, da.Tensor) else partial)
    if partial.shape[0] < n0:
        raise ValueError(f"partial cloud has {partial.shape[0]} points, fewer than n0={n0}")
    sampled = partial[geometry.fps(partial, n0)]
    return da.concat([p0, da.Tensor(sampled)], axis=0)
