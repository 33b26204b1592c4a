"""The full interpolation network: encoder, region filter, two sister branches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import motion_filter as mf
from . import tensor as T
from .encoder import Encoder, EncoderConfig
from .nn import Conv, Module
from .synthesis import Branch, BranchOutput, laplacian_bands
from .voxel import voxelize_sample


@dataclass
class ModelConfig:
    n_time_bins: int = 8
    n_heads: int = 2
    embed_dim: int = 8
    widths: tuple[int, ...] = (4, 8, 16)
    head_hidden: int = 12
    kernel_grid: int = 3
    max_offset: float = 8.0
    sigmas: tuple[float, ...] = mf.DEFAULT_SIGMAS
    combine: str = "blend"      # "blend" (learned per-pixel mix) or "mean"
    zero_head: bool = True

    def encoder_config(self):
        return EncoderConfig(self.n_time_bins, self.n_heads, self.embed_dim, tuple(self.widths))

    def validate(self):
        if self.combine not in ("blend", "mean"):
            raise ValueError(f"combine must be 'blend' or 'mean', got {self.combine!r}")
        self.encoder_config().validate()
        return self


@dataclass
class Inputs:
    """Parameter-free preprocessing of one sample."""
    frames: np.ndarray           # [4,3,H,W]
    voxels: np.ndarray           # [4,N_TB,H,W]
    region: np.ndarray           # [4,H,W]
    loss_filter: np.ndarray      # [H,W]
    ground_truth: np.ndarray | None = None
    name: str = ""


def prepare(sample, cfg):
    grid = voxelize_sample(sample, cfg.n_time_bins)
    filt = mf.region_filter(grid.data, cfg.sigmas)
    return Inputs(sample.frames, grid.data, filt.weights, mf.loss_filter(filt),
                  sample.ground_truth, getattr(sample, "name", ""))


@dataclass
class Output:
    final: T.Tensor              # clamped to [0,1]
    pre_clamp: T.Tensor
    standard: BranchOutput
    filtered: BranchOutput


class MAEVINet(Module):
    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg = (cfg or ModelConfig()).validate()
        rng = np.random.default_rng(seed)
        enc_cfg = cfg.encoder_config()
        self.encoder = Encoder(rng, enc_cfg)
        feat_ch = enc_cfg.feature_channels()
        kw = dict(hidden=cfg.head_hidden, grid=cfg.kernel_grid, max_offset=cfg.max_offset,
                  zero_head=cfg.zero_head)
        self.standard = Branch(rng, feat_ch, **kw)
        self.filtered = Branch(rng, feat_ch, **kw)
        if cfg.combine == "blend":
            self.blend = Conv(rng, feat_ch[0] + 4, 3, 3, zero=cfg.zero_head)

    def forward(self, inputs):
        feats = self.encoder(T.Tensor(inputs.voxels))
        std = self.standard(feats, laplacian_bands(inputs.frames))
        filt = self.filtered(feats, laplacian_bands(mf.apply_filter(inputs.frames, inputs.region)))
        if self.cfg.combine == "mean":
            pre = T.scale(T.add(std.fused, filt.fused), 0.5)
        else:
            # sigmoid(0) = 0.5, so a zero-initialised blend head starts at the mean
            gate = T.sigmoid(self.blend(T.concat([feats[0], T.Tensor(inputs.region)], axis=0)))
            pre = T.add(filt.fused, T.mul(gate, T.sub(std.fused, filt.fused)))
        return Output(T.clamp(pre, 0.0, 1.0), pre, std, filt)
