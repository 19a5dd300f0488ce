"""Shape-aware upsampling: neighborhood embedding, self-attention, point splitting."""
from __future__ import annotations

import numpy as np

from dmfnet import diffarray as da
from dmfnet import geometry
from dmfnet.errors import ShapeError
from dmfnet.params import declare_mlp, mlp


def declare_ncb(params, cfg, prefix):
    half = cfg.c_local // 2
    declare_mlp(params, f"{prefix}.fin", [3, cfg.ncb_feat, cfg.ncb_feat])
    declare_mlp(params, f"{prefix}.alpha", [6, half, half])
    declare_mlp(params, f"{prefix}.beta", [2 * cfg.ncb_feat, half, half])


def _context(x, k):
    """[x_i, x_i - x_ij] for the k nearest j of every i (searched in x itself)."""
    n, c = x.shape
    nbr = geometry.knn(x.data, x.data, k)
    center = da.broadcast_to(da.reshape(x, (n, 1, c)), (n, k, c))
    return da.concat([center, da.sub(center, geometry.gather_neighbors(x, nbr))], axis=2)


def ncb(points, params, k, prefix):
    """Local feature: max over k of [alpha(geometric context), beta(feature context)]."""
    points = da.as_tensor(points)
    if k > points.shape[0]:
        raise ValueError(f"ncb: k={k} exceeds {points.shape[0]} points")
    c_geo = _context(points, k)
    f_in = mlp(points, params, f"{prefix}.fin")
    c_f = _context(f_in, k)
    both = da.concat([mlp(c_geo, params, f"{prefix}.alpha"), mlp(c_f, params, f"{prefix}.beta")], axis=2)
    out, _ = da.max_over_axis(both, axis=1)
    return out


def declare_sat(params, d, ffn_mult, prefix):
    for w in ("wq", "wk", "wv", "wo"):
        params.add(f"{prefix}.{w}", (d, d), fan_in=d)
    params.add(f"{prefix}.norm.gain", (d,), fill=1.0)
    params.add(f"{prefix}.norm.bias", (d,), fill=0.0)
    declare_mlp(params, f"{prefix}.ffn", [d, ffn_mult * d, d])


def sat_block(x, params, heads, prefix):
    """Z = LayerNorm(Q + MultiHead(Q, K, V)); returns Z + FFN(Z)."""
    x = da.as_tensor(x)
    d = params[f"{prefix}.wq"].shape[0]
    if x.shape[1] != d:
        raise ShapeError(f"{prefix}: input width {x.shape[1]} != {d}")
    q = da.linear(x, params[f"{prefix}.wq"])
    k = da.linear(x, params[f"{prefix}.wk"])
    v = da.linear(x, params[f"{prefix}.wv"])
    att = da.linear(da.attention_heads(q, k, v, heads), params[f"{prefix}.wo"])
    z = da.layer_norm(da.add(q, att), params[f"{prefix}.norm.gain"], params[f"{prefix}.norm.bias"])
    return da.add(z, mlp(z, params, f"{prefix}.ffn"))


def declare_sut(params, cfg, prefix):
    declare_ncb(params, cfg, f"{prefix}.ncb")
    params.add(f"{prefix}.proj.weight", (cfg.c_local + cfg.channels, cfg.c_enh))
    params.add(f"{prefix}.proj.bias", (cfg.c_enh,), fan_in=cfg.c_local + cfg.channels)
    for i in range(cfg.sat_blocks):
        declare_sat(params, cfg.c_enh, cfg.ffn_mult, f"{prefix}.sat{i}")
    r = cfg.up_ratio
    params.add(f"{prefix}.split.weight", (cfg.c_enh, r * cfg.c_enh), fan_in=cfg.c_enh)
    params.add(f"{prefix}.split.bias", (cfg.c_enh,), fan_in=cfg.c_enh)
    declare_mlp(params, f"{prefix}.disp", [cfg.c_enh + cfg.c_local, cfg.disp_hidden, 3])


def sut(points, fused, params, cfg, prefix, r=None):
    """One upsampling stage: N_in points -> r * N_in points.

    Child rows r*i .. r*i+r-1 are P_in[i] plus a predicted displacement.
    """
    r = cfg.up_ratio if r is None else r
    if r < 1:
        raise ValueError(f"upsample ratio must be >= 1, got {r}")
    points = da.as_tensor(points)
    n = points.shape[0]
    k = min(cfg.ncb_k, n)
    f_l = ncb(points, params, k, f"{prefix}.ncb")
    x = da.concat([f_l, da.replicate(fused, n)], axis=1)
    x = da.linear(x, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])
    for i in range(cfg.sat_blocks):
        x = sat_block(x, params, cfg.heads, f"{prefix}.sat{i}")
    w = params[f"{prefix}.split.weight"]
    if w.shape[1] != r * cfg.c_enh:
        raise ShapeError(f"{prefix}: split weight built for ratio {w.shape[1] // cfg.c_enh}, asked for {r}")
    x = da.transpose_conv1d(x, r, w, params[f"{prefix}.split.bias"])
    x = da.concat([x, da.repeat_rows(f_l, r)], axis=1)
    delta = mlp(x, params, f"{prefix}.disp")
    return da.add(da.repeat_rows(points, r), delta)


def declare_upsampler(params, cfg, prefix="up"):
    for s in range(2):
        declare_sut(params, cfg, f"{prefix}{s}")


def upsample_pipeline(seed, fused, params, cfg, prefix="up"):
    seed = da.as_tensor(seed)
    if seed.shape[0] != cfg.n_seed:
        raise ShapeError(f"seed cloud must have {cfg.n_seed} points, got {seed.shape[0]}")
    p1 = sut(seed, fused, params, cfg, f"{prefix}0")
    pc = sut(p1, fused, params, cfg, f"{prefix}1")
    return p1, pc


def zero_displacement(params, prefix):
    """Zero the final displacement layer of one SUT (test and diagnostic helper)."""
    last = max(int(n.split(".layer")[1].split(".")[0]) for n in params.names()
               if n.startswith(f"{prefix}.disp.layer"))
    for suffix in ("weight", "bias"):
        p = params[f"{prefix}.disp.layer{last}.{suffix}"]
        p.data = np.zeros_like(p.data)
