"""Architecture and optimizer constants with ``paper`` and ``toy`` presets."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    n_points: int = 2048
    image_size: int = 224
    channels: int = 512
    # 3D encoder
    edge_k: int = 20
    edge_widths: tuple = (64, 256)
    pool_ratio: int = 4
    pool_k: tuple = (16, 6)
    # 2D encoder: stem stride 2, then one entry per stage
    image_strides: tuple = (2, 2, 2, 2)
    # coarse generator
    n0: int = 256
    expand_width: int = 512
    head_hidden: int = 128
    # upsampler
    ncb_k: int = 16
    ncb_feat: int = 64
    c_local: int = 128
    c_enh: int = 512
    heads: int = 4
    sat_blocks: int = 3
    ffn_mult: int = 2
    up_ratio: int = 2
    disp_hidden: int = 64

    @property
    def n_pixels(self):
        return self.grid_size ** 2

    @property
    def grid_size(self):
        return self.image_size // (2 * math.prod(self.image_strides))

    @property
    def n_point_feats(self):
        return self.n_points // self.pool_ratio ** 2

    @property
    def n_seed(self):
        return 2 * self.n0

    @property
    def n1(self):
        return self.n_seed * self.up_ratio

    @property
    def n_complete(self):
        return self.n1 * self.up_ratio

    def stage_channels(self):
        c = self.channels
        return [c >> (len(self.image_strides) - 1 - i) for i in range(len(self.image_strides))]

    def validate(self):
        if self.n_points % self.pool_ratio ** 2:
            raise ConfigError(f"n_points={self.n_points} not divisible by pool_ratio^2={self.pool_ratio ** 2}")
        if self.image_size % (2 * math.prod(self.image_strides)):
            raise ConfigError(f"image_size={self.image_size} not divisible by total image stride")
        if self.channels % 2 ** len(self.image_strides):
            raise ConfigError(f"channels={self.channels} too small for {len(self.image_strides)} doubling stages")
        if self.c_enh % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide c_enh={self.c_enh}")
        if self.c_local % 2:
            raise ConfigError("c_local must be even (split between geometric and feature branches)")
        if self.n0 < 1 or self.n_points < self.n0:
            raise ConfigError(f"need 1 <= n0 <= n_points, got n0={self.n0}")
        if self.edge_k > self.n_points // self.pool_ratio:
            raise ConfigError("edge_k exceeds the point count after the first pooling")
        if self.pool_k[1] > self.n_points // self.pool_ratio:
            raise ConfigError("second pool_k exceeds the pooled point count")
        if self.up_ratio < 1:
            raise ConfigError("up_ratio must be >= 1")
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            vals = v if isinstance(v, tuple) else (v,)
            if any(x < 1 for x in vals):
                raise ConfigError(f"{f.name} must be positive, got {v}")
        return self

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 0.7
    decay_every: int = 20
    epochs: int = 120
    batch_size: int = 16
    seed: int = 0
    clip_grad: float | None = None
    checkpoint_every: int = 10

    def validate(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.lr0 < 0 or self.eps <= 0 or self.decay_factor <= 0:
            raise ConfigError("lr0 must be >= 0, eps and decay_factor > 0")
        if self.decay_every < 1 or self.epochs < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("decay_every, batch_size, checkpoint_every must be >= 1")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


PAPER_NET = NetConfig()
TOY_NET = NetConfig(
    n_points=256, image_size=32, channels=64, edge_widths=(16, 32),
    image_strides=(2, 2, 1, 1), n0=64, expand_width=64, head_hidden=16,
    ncb_feat=16, c_local=32, c_enh=64, heads=2, disp_hidden=16,
)
PAPER_TRAIN = TrainConfig()
TOY_TRAIN = TrainConfig(lr0=1e-3, epochs=60, batch_size=8, checkpoint_every=10)

PRESETS = {
    "paper": (PAPER_NET, PAPER_TRAIN),
    "toy": (TOY_NET, TOY_TRAIN),
}


def resolve(preset, net_overrides=None, train_overrides=None):
    """Preset plus overrides, validated before any work starts."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    net, train = PRESETS[preset]
    try:
        net = dataclasses.replace(net, **(net_overrides or {}))
        train = dataclasses.replace(train, **(train_overrides or {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return net.validate(), train.validate()


def net_from_dict(d):
    return NetConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}).validate()
