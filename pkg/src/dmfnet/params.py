"""Named parameter collections and the shared-MLP building block."""
from __future__ import annotations

import math

import numpy as np

from dmfnet import diffarray as da


class ModelParams:
    """Ordered name -> :class:`Parameter` map with deterministic initialization.

    Weights are drawn uniformly from +-1/sqrt(fan_in) in registration order
    from a single seeded generator.
    """

    def __init__(self, seed=0):
        self._params = {}
        self._rng = np.random.default_rng(seed)

    def add(self, name, shape, fan_in=None, fill=None):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if fill is not None:
            value = np.full(shape, float(fill))
        else:
            bound = 1.0 / math.sqrt(fan_in if fan_in else shape[0])
            value = self._rng.uniform(-bound, bound, size=shape)
        p = da.Parameter(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def count(self):
        return sum(p.size for p in self._params.values())

    def state(self):
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state(self, state):
        missing = [n for n in self._params if n not in state]
        extra = [n for n in state if n not in self._params]
        if missing or extra:
            raise KeyError(f"parameter sets differ: missing={missing[:3]} extra={extra[:3]}")
        for n, p in self._params.items():
            if state[n].shape != p.shape:
                raise ValueError(f"shape mismatch for {n}: {state[n].shape} vs {p.shape}")
        for n, p in self._params.items():
            p.data = np.array(state[n], dtype=np.float64)


def declare_mlp(params, prefix, widths):
    """Register a shared MLP ``widths[0] -> ... -> widths[-1]``."""
    for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
        params.add(f"{prefix}.layer{i}.weight", (cin, cout), fan_in=cin)
        params.add(f"{prefix}.layer{i}.bias", (cout,), fan_in=cin)


def mlp(x, params, prefix, final_relu=False):
    """Apply a shared MLP registered by :func:`declare_mlp`; relu between layers."""
    i = 0
    while f"{prefix}.layer{i}.weight" in params:
        if i:
            x = da.relu(x)
        x = da.linear(x, params[f"{prefix}.layer{i}.weight"], params[f"{prefix}.layer{i}.bias"])
        i += 1
    if i == 0:
        raise KeyError(f"no MLP registered under {prefix!r}")
    return da.relu(x) if final_relu else x
