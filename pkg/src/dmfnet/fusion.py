"""Dual-channel cross-attention fusion of pixel-wise and point-wise features."""
from __future__ import annotations

from dataclasses import dataclass

from dmfnet import diffarray as da
from dmfnet.errors import ShapeError
from dmfnet.params import declare_mlp, mlp


@dataclass
class CrossAttention:
    w_ip: da.Tensor  # N_I x N_P
    w_pi: da.Tensor  # N_P x N_I


def global_pool(feat):
    """Channel-wise max over rows: n x C -> 1 x C."""
    feat = da.as_tensor(feat)
    if feat.shape[0] < 1:
        raise ShapeError("global_pool of an empty feature set")
    out, _ = da.max_over_axis(feat, axis=0)
    return da.reshape(out, (1, feat.shape[1]))


def enhance_and_attend(side_feat, other_global, params, prefix, m):
    """softmax over the last axis of MLP([side_feat, replicate(other_global)]), shape n x m."""
    side_feat = da.as_tensor(side_feat)
    n = side_feat.shape[0]
    enhanced = da.concat([side_feat, da.replicate(other_global, n)], axis=1)
    logits = mlp(enhanced, params, prefix)
    if logits.shape[1] != m:
        raise ShapeError(f"{prefix}: MLP emits {logits.shape[1]} columns, attention needs {m}")
    return da.softmax_last(logits)


def declare_fusion(params, cfg, prefix="fusion"):
    c = cfg.channels
    declare_mlp(params, f"{prefix}.mu", [2 * c, c, cfg.n_point_feats])
    declare_mlp(params, f"{prefix}.theta", [2 * c, c, cfg.n_pixels])


def dual_fuse(f_p, f_i, params, prefix="fusion"):
    """Fuse point features (N_P x C) and pixel features (N_I x C) into one 1 x C vector."""
    f_p, f_i = da.as_tensor(f_p), da.as_tensor(f_i)
    if f_p.shape[1] != f_i.shape[1]:
        raise ShapeError(f"channel mismatch: points {f_p.shape[1]}, pixels {f_i.shape[1]}")
    g_p, g_i = global_pool(f_p), global_pool(f_i)
    w_ip = enhance_and_attend(f_i, g_p, params, f"{prefix}.mu", f_p.shape[0])
    w_pi = enhance_and_attend(f_p, g_i, params, f"{prefix}.theta", f_i.shape[0])
    f_ip = da.matmul(w_ip, f_p)
    f_pi = da.matmul(w_pi, f_i)
    fused = global_pool(da.concat([f_ip, f_pi], axis=0))
    return fused, CrossAttention(w_ip, w_pi)
