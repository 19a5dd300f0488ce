import numpy as np
import pytest

from dmfnet import diffarray as da
from dmfnet.config import TOY_NET
from dmfnet.errors import ShapeError
from dmfnet.generator import declare_generator, generate_coarse, seed_merge
from dmfnet.model import CompletionNet
from dmfnet.params import ModelParams, declare_mlp, mlp


@pytest.fixture(scope="module")
def gen_params():
    params = ModelParams(5)
    declare_generator(params, TOY_NET)
    return params


def test_toy_output_shape(gen_params, rng):
    p0 = generate_coarse(rng.normal(size=(1, 64)), gen_params, TOY_NET)
    assert p0.shape == (TOY_NET.n0, 3) and np.all(np.isfinite(p0.data))


def test_zero_parameters_give_origin_cluster(rng):
    params = ModelParams(0)
    declare_generator(params, TOY_NET)
    for p in params:
        p.data = np.zeros_like(p.data)
    p0 = generate_coarse(rng.normal(size=(1, 64)), params, TOY_NET)
    assert p0.shape == (64, 3) and np.array_equal(p0.data, np.zeros((64, 3)))


def test_deterministic(gen_params, rng):
    f = rng.normal(size=(1, 64))
    assert np.array_equal(generate_coarse(f, gen_params, TOY_NET).data,
                          generate_coarse(f, gen_params, TOY_NET).data)


def test_width_mismatch(gen_params):
    with pytest.raises(ShapeError):
        generate_coarse(np.zeros((1, 32)), gen_params, TOY_NET)


def test_residual_block_with_zero_weights_is_identity(rng):
    params = ModelParams(0)
    declare_mlp(params, "res", [6, 3, 6])
    for p in params:
        p.data = np.zeros_like(p.data)
    x = da.Tensor(rng.normal(size=(5, 6)))
    out = da.add(x, mlp(x, params, "res"))
    assert np.array_equal(out.data, x.data)


def test_depends_only_on_fused(rng):
    net = CompletionNet(TOY_NET, seed=1)
    f = rng.normal(size=(1, 64))
    a = generate_coarse(f, net.params, TOY_NET).data
    net.forward(rng.normal(size=(256, 3)), rng.uniform(size=(32, 32, 3)))
    b = generate_coarse(f, net.params, TOY_NET).data
    assert np.array_equal(a, b)


def test_seed_merge_layout(rng):
    p0 = da.Tensor(rng.normal(size=(64, 3)))
    partial = rng.normal(size=(256, 3))
    seed = seed_merge(p0, partial, 64).data
    assert seed.shape == (128, 3)
    assert np.array_equal(seed[:64], p0.data)
    rows = {tuple(r) for r in partial}
    assert all(tuple(r) in rows for r in seed[64:])
    assert len({tuple(r) for r in seed[64:]}) == 64


def test_seed_merge_rejects_degenerate(rng):
    with pytest.raises(ValueError):
        seed_merge(da.Tensor(np.zeros((0, 3))), rng.normal(size=(8, 3)), 0)
    with pytest.raises(ValueError):
        seed_merge(da.Tensor(np.zeros((16, 3))), rng.normal(size=(8, 3)), 16)
