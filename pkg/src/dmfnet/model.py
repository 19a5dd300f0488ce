"""The full completion network: encoders, fusion, coarse generator, upsampler."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dmfnet import diffarray as da
from dmfnet.config import NetConfig
from dmfnet.encoders import (declare_image_encoder, declare_point_encoder, encode_image,
                             encode_points)
from dmfnet.fusion import declare_fusion, dual_fuse
from dmfnet.generator import declare_generator, generate_coarse, seed_merge
from dmfnet.metrics import build_pyramid, total_loss
from dmfnet.params import ModelParams
from dmfnet.upsampler import declare_upsampler, upsample_pipeline


@dataclass
class Outputs:
    f_p: da.Tensor
    f_i: da.Tensor
    w_ip: da.Tensor
    w_pi: da.Tensor
    fused: da.Tensor
    p0: da.Tensor
    seed: da.Tensor
    p1: da.Tensor
    pc: da.Tensor


def build_params(cfg: NetConfig, seed=0) -> ModelParams:
    params = ModelParams(seed)
    declare_point_encoder(params, cfg)
    declare_image_encoder(params, cfg)
    declare_fusion(params, cfg)
    declare_generator(params, cfg)
    declare_upsampler(params, cfg)
    return params


class CompletionNet:
    def __init__(self, cfg: NetConfig, seed=0, params=None):
        self.cfg = cfg.validate()
        self.params = params if params is not None else build_params(cfg, seed)

    def forward(self, partial, image) -> Outputs:
        cfg, params = self.cfg, self.params
        f_p = encode_points(partial, params, cfg)
        f_i = encode_image(image, params, cfg)
        fused, att = dual_fuse(f_p.feat, f_i.feat, params)
        p0 = generate_coarse(fused, params, cfg)
        seed = seed_merge(p0, partial, cfg.n0)
        p1, pc = upsample_pipeline(seed, fused, params, cfg)
        return Outputs(f_p.feat, f_i.feat, att.w_ip, att.w_pi, fused, p0, seed, p1, pc)

    def pyramid(self, gt):
        return build_pyramid(gt, self.cfg.n_seed, min(self.cfg.n1, np.asarray(gt).shape[0]))

    def loss(self, out: Outputs, gt, pyramid=None):
        return total_loss(out.seed, out.p1, out.pc, pyramid if pyramid is not None else self.pyramid(gt))
