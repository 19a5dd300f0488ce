import numpy as np
import pytest

from dmfnet import diffarray as da
from dmfnet.config import TOY_NET
from dmfnet.encoders import (declare_image_encoder, declare_point_encoder, edgeconv,
                             encode_image, encode_points, sagpool)
from dmfnet.errors import ShapeError
from dmfnet.params import ModelParams, declare_mlp


def one_layer(prefix, weight, bias):
    params = ModelParams()
    w = np.asarray(weight, dtype=float)
    declare_mlp(params, prefix, [w.shape[0], w.shape[1]])
    params[f"{prefix}.layer0.weight"].data = w
    params[f"{prefix}.layer0.bias"].data = np.asarray(bias, dtype=float)
    return params


def test_edgeconv_identical_features_constant_output(rng):
    params = ModelParams(3)
    declare_mlp(params, "e", [4, 5])
    feat = np.tile(rng.normal(size=(1, 2)), (6, 1))
    out = edgeconv(feat, rng.normal(size=(6, 3)), 3, params, "e").data
    assert np.all(out == out[0])


def test_edgeconv_hand_evaluated():
    params = one_layer("e", [[1.0], [2.0]], [0.0])
    f = np.array([[0.0], [1.0], [3.0]])
    # neighbors (k=2): 0->{0,1}, 1->{1,0}, 2->{2,1}; out_i = max_j relu(f_i + 2 (f_j - f_i))
    out = edgeconv(f, f, 2, params, "e").data
    assert np.max(np.abs(out[:, 0] - [2.0, 1.0, 3.0])) < 1e-10


def test_edgeconv_permutation_equivariant(rng):
    params = ModelParams(1)
    declare_mlp(params, "e", [6, 8])
    x = rng.normal(size=(20, 3))
    perm = rng.permutation(20)
    a = edgeconv(x, x, 5, params, "e").data
    b = edgeconv(x[perm], x[perm], 5, params, "e").data
    assert np.allclose(b, a[perm], atol=1e-12, rtol=0)


def test_edgeconv_k_too_large(rng):
    params = ModelParams()
    declare_mlp(params, "e", [6, 2])
    with pytest.raises(ValueError):
        edgeconv(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), 4, params, "e")


def test_sagpool_ratio_one_scales_by_score(rng):
    params = ModelParams(2)
    declare_mlp(params, "p", [4, 1])
    feat, coords = rng.normal(size=(8, 4)), rng.normal(size=(8, 3))
    out, kept = sagpool(feat, coords, 1, 3, params, "p")
    assert sorted(kept) == list(range(8))
    w, b = params["p.layer0.weight"].data, params["p.layer0.bias"].data
    from dmfnet import geometry
    nbr = geometry.knn(coords, coords, 3)
    scores = np.tanh(feat[nbr].mean(axis=1) @ w + b)[:, 0]
    assert np.allclose(out.data, feat[kept] * scores[kept, None], atol=1e-14, rtol=0)


def test_sagpool_topk_matches_sort_oracle():
    rng = np.random.default_rng(11)
    params = ModelParams(4)
    declare_mlp(params, "p", [5, 1])
    from dmfnet import geometry
    for _ in range(20):
        feat, coords = rng.normal(size=(16, 5)), rng.normal(size=(16, 3))
        _, kept = sagpool(feat, coords, 4, 4, params, "p")
        nbr = geometry.knn(coords, coords, 4)
        s = (feat[nbr].mean(axis=1) @ params["p.layer0.weight"].data
             + params["p.layer0.bias"].data)[:, 0]
        oracle = sorted(range(16), key=lambda i: (-np.tanh(s[i]), i))[:4]
        assert set(kept) == set(oracle)


def test_sagpool_ratio_must_divide(rng):
    params = ModelParams()
    declare_mlp(params, "p", [2, 1])
    with pytest.raises(ValueError):
        sagpool(rng.normal(size=(10, 2)), rng.normal(size=(10, 3)), 4, 3, params, "p")


def test_encode_points_toy_shape(rng):
    params = ModelParams(0)
    declare_point_encoder(params, TOY_NET)
    out = encode_points(rng.normal(size=(256, 3)), params, TOY_NET)
    assert out.feat.shape == (16, 64) and out.source_idx.shape == (16,)


def test_encode_points_rows_follow_ratio_law():
    cfg = TOY_NET.__class__(**{**TOY_NET.__dict__, "n_points": 320})
    params = ModelParams(0)
    declare_point_encoder(params, cfg)
    out = encode_points(np.random.default_rng(0).normal(size=(320, 3)), params, cfg)
    assert out.feat.shape[0] == 320 // 16


def test_encode_points_permutation(rng):
    params = ModelParams(0)
    declare_point_encoder(params, TOY_NET)
    p = rng.normal(size=(256, 3))
    perm = rng.permutation(256)
    a = encode_points(p, params, TOY_NET)
    b = encode_points(p[perm], params, TOY_NET)
    assert np.allclose(a.feat.data, b.feat.data, atol=1e-9, rtol=0)
    assert np.array_equal(p[perm][b.source_idx], p[a.source_idx])


def test_encode_points_wrong_size(rng):
    params = ModelParams(0)
    declare_point_encoder(params, TOY_NET)
    with pytest.raises(ShapeError):
        encode_points(rng.normal(size=(100, 3)), params, TOY_NET)


def test_encode_image_toy_shape_and_determinism(rng):
    params = ModelParams(0)
    declare_image_encoder(params, TOY_NET)
    img = rng.uniform(size=(32, 32, 3))
    a = encode_image(img, params, TOY_NET)
    b = encode_image(img, params, TOY_NET)
    assert a.feat.shape == (16, 64) and (a.grid_h, a.grid_w) == (4, 4)
    assert np.array_equal(a.feat.data, b.feat.data)


def test_encode_image_zero_image_finite():
    params = ModelParams(0)
    declare_image_encoder(params, TOY_NET)
    out = encode_image(np.zeros((32, 32, 3)), params, TOY_NET).feat
    assert out.shape == (16, 64) and np.all(np.isfinite(out.data))


def test_encode_image_wrong_size():
    params = ModelParams(0)
    declare_image_encoder(params, TOY_NET)
    with pytest.raises(ShapeError):
        encode_image(np.zeros((30, 30, 3)), params, TOY_NET)
