"""Point-cloud encoder (dynamic EdgeConv + SAGPool) and residual image encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dmfnet import diffarray as da
from dmfnet import geometry
from dmfnet.errors import ShapeError
from dmfnet.params import declare_mlp, mlp


@dataclass
class PointFeature:
    feat: da.Tensor
    source_idx: np.ndarray


@dataclass
class PixelFeature:
    feat: da.Tensor
    grid_h: int
    grid_w: int


def edgeconv(feat, knn_source, k, params, prefix):
    """out_i = max_j relu(MLP([f_i, f_j - f_i])) over the k nearest neighbors j of i.

    Neighbors are searched in ``knn_source`` (coordinates for the first layer,
    the incoming features afterwards).
    """
    feat = da.as_tensor(feat)
    n, c = feat.shape
    if k > n:
        raise ValueError(f"edgeconv: k={k} exceeds {n} points")
    nbr = geometry.knn(knn_source, knn_source, k)
    neighbors = geometry.gather_neighbors(feat, nbr)
    center = da.broadcast_to(da.reshape(feat, (n, 1, c)), (n, k, c))
    edges = da.concat([center, da.sub(neighbors, center)], axis=2)
    out, _ = da.max_over_axis(mlp(edges, params, prefix, final_relu=True), axis=1)
    return out


def sagpool(feat, coords, ratio, k, params, prefix):
    """Self-attention graph pooling: keep the top n/ratio nodes by a tanh score.

    The score of node i is tanh(w . mean_{j in knn(i)} f_j + b). Kept rows are
    ordered by descending score (ties to the smaller index) and gated by their
    scores. Returns the pooled features and the kept indices.
    """
    feat = da.as_tensor(feat)
    n = feat.shape[0]
    if ratio < 1 or n % ratio:
        raise ValueError(f"sagpool: ratio {ratio} does not divide {n}")
    if k > n:
        raise ValueError(f"sagpool: k={k} exceeds {n} points")
    nbr = geometry.knn(coords, coords, k)
    agg = da.mean(geometry.gather_neighbors(feat, nbr), axis=1)
    score = da.tanh(mlp(agg, params, prefix))  # n x 1
    order = np.lexsort((np.arange(n), -score.data[:, 0]))
    kept = order[: n // ratio]
    gated = da.mul(da.take(feat, kept), da.take(score, kept))
    return gated, kept


def declare_point_encoder(params, cfg, prefix="enc3d"):
    w0, w1 = cfg.edge_widths
    declare_mlp(params, f"{prefix}.edge0", [6, w0])
    declare_mlp(params, f"{prefix}.pool0", [w0, 1])
    declare_mlp(params, f"{prefix}.edge1", [2 * w0, w1])
    declare_mlp(params, f"{prefix}.pool1", [w1, 1])
    declare_mlp(params, f"{prefix}.head", [w1, cfg.channels])


def encode_points(points, params, cfg, prefix="enc3d") -> PointFeature:
    points = da.as_tensor(points)
    if points.shape != (cfg.n_points, 3):
        raise ShapeError(f"expected {cfg.n_points}x3 points, got {points.shape}")
    coords = points.data
    f = edgeconv(points, coords, cfg.edge_k, params, f"{prefix}.edge0")
    f, kept0 = sagpool(f, coords, cfg.pool_ratio, cfg.pool_k[0], params, f"{prefix}.pool0")
    coords = coords[kept0]
    f = edgeconv(f, f.data, cfg.edge_k, params, f"{prefix}.edge1")
    f, kept1 = sagpool(f, coords, cfg.pool_ratio, cfg.pool_k[1], params, f"{prefix}.pool1")
    f = mlp(f, params, f"{prefix}.head")
    return PointFeature(f, kept0[kept1])


def _declare_norm(params, name, c):
    params.add(f"{name}.gain", (c,), fill=1.0)
    params.add(f"{name}.bias", (c,), fill=0.0)


def _norm(x, params, name):
    return da.layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"])


def _declare_conv(params, name, k, cin, cout):
    params.add(f"{name}.weight", (k, k, cin, cout), fan_in=k * k * cin)


def declare_residual_block(params, prefix, c):
    _declare_conv(params, f"{prefix}.conv0", 3, c, c)
    _declare_norm(params, f"{prefix}.norm0", c)
    _declare_conv(params, f"{prefix}.conv1", 3, c, c)
    _declare_norm(params, f"{prefix}.norm1", c)


def residual_block2d(x, params, prefix):
    """relu(x + norm(conv(relu(norm(conv(x)))))); norms act on the channel axis."""
    h = da.relu(_norm(da.conv2d(x, params[f"{prefix}.conv0.weight"]), params, f"{prefix}.norm0"))
    h = _norm(da.conv2d(h, params[f"{prefix}.conv1.weight"]), params, f"{prefix}.norm1")
    return da.relu(da.add(x, h))


def declare_image_encoder(params, cfg, prefix="enc2d"):
    chans = cfg.stage_channels()
    _declare_conv(params, f"{prefix}.stem", 2, 3, chans[0])
    _declare_norm(params, f"{prefix}.stem_norm", chans[0])
    cin = chans[0]
    for s, (stride, c) in enumerate(zip(cfg.image_strides, chans)):
        _declare_conv(params, f"{prefix}.stage{s}.down", 2 if stride == 2 else 1, cin, c)
        _declare_norm(params, f"{prefix}.stage{s}.down_norm", c)
        for b in range(2):
            declare_residual_block(params, f"{prefix}.stage{s}.block{b}", c)
        cin = c


def encode_image(image, params, cfg, prefix="enc2d") -> PixelFeature:
    image = da.as_tensor(image)
    size = cfg.image_size
    if image.shape != (size, size, 3):
        raise ShapeError(f"expected {size}x{size}x3 image, got {image.shape}")
    x = da.conv2d(image, params[f"{prefix}.stem.weight"], stride=2)
    x = da.relu(_norm(x, params, f"{prefix}.stem_norm"))
    for s, stride in enumerate(cfg.image_strides):
        x = da.conv2d(x, params[f"{prefix}.stage{s}.down.weight"], stride=stride)
        x = da.relu(_norm(x, params, f"{prefix}.stage{s}.down_norm"))
        for b in range(2):
            x = residual_block2d(x, params, f"{prefix}.stage{s}.block{b}")
    gh, gw, c = x.shape
    return PixelFeature(da.reshape(x, (gh * gw, c)), gh, gw)
