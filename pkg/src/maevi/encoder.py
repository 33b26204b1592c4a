"""Event feature encoder: temporal self-attention, then three pooling/SmoothNet stages."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv, Linear, Module


@dataclass
class EncoderConfig:
    n_time_bins: int = 8
    n_heads: int = 2
    embed_dim: int = 8
    widths: tuple = (4, 8, 16)

    def validate(self):
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.n_time_bins % 4:
            raise ValueError(f"n_time_bins must be a multiple of 4, got {self.n_time_bins}")
        if len(self.widths) != 3:
            raise ValueError("need three stage widths")
        return self

    def time_bins(self):
        """Remaining time bins at each of the three stages."""
        n = self.n_time_bins
        return (n // 2, n // 4, n // 4)

    def feature_channels(self):
        return tuple(w * t for w, t in zip(self.widths, self.time_bins()))


def abs_pool_temporal(x):
    """``[C,T,H,W] -> [C,T/2,H,W]``."""
    return T.abs_pool(x, (1, 2, 1, 1))


def abs_pool_spatial(x):
    """``[C,T,H,W] -> [C,T,H/2,W/2]``."""
    return T.abs_pool(x, (1, 1, 2, 2))


class MultiHeadSelfAttention(Module):
    """Attention across the ``4 * N_TB`` temporal slices of each pixel, with a residual."""

    def __init__(self, rng, embed_dim=8, n_heads=2):
        if embed_dim % n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        self.n_heads = n_heads
        self.embed_dim = embed_dim
        self.embed = Linear(rng, 1, embed_dim)
        self.q = Linear(rng, embed_dim, embed_dim)
        self.k = Linear(rng, embed_dim, embed_dim)
        self.v = Linear(rng, embed_dim, embed_dim)
        self.out = Linear(rng, embed_dim, 1)

    def forward(self, voxels, return_attention=False):
        n_int, n_tb, h, w = voxels.shape
        s = n_int * n_tb
        hd = self.embed_dim // self.n_heads
        tokens = T.reshape(T.transpose(voxels, (2, 3, 0, 1)), (h * w, s))
        # attention has no positional terms, so pixels with identical token rows
        # (mostly event-free ones) share one result
        _, first, inverse = np.unique(tokens.data, axis=0, return_index=True, return_inverse=True)
        uniq = T.gather_rows(tokens, first)
        u = len(first)
        e = self.embed(T.reshape(uniq, (u, s, 1)))

        def heads(t):
            return T.transpose(T.reshape(t, (u, s, self.n_heads, hd)), (0, 2, 1, 3))

        q, k, v = heads(self.q(e)), heads(self.k(e)), heads(self.v(e))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        attn = T.softmax(scores, axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (u, s, self.embed_dim))
        y = T.gather_rows(T.reshape(self.out(ctx), (u, s)), inverse.reshape(-1))
        y = T.reshape(y, (h, w, n_int, n_tb))
        out = T.add(voxels, T.transpose(y, (2, 3, 0, 1)))
        if return_attention:
            return out, T.gather_rows(attn, inverse.reshape(-1))
        return out


class SmoothNet(Module):
    """3x3x3 conv, then a residual block of two 3x3x3 convs."""

    def __init__(self, rng, c_in, c_out, slope=0.1):
        self.conv = Conv(rng, c_in, c_out, 3, dims=3)
        self.res_a = Conv(rng, c_out, c_out, 3, dims=3)
        self.res_b = Conv(rng, c_out, c_out, 3, dims=3)
        self.slope = slope

    def forward(self, x):
        x1 = T.leaky_relu(self.conv(x), self.slope)
        r = self.res_b(T.leaky_relu(self.res_a(x1), self.slope))
        return T.add(x1, r)


class Encoder(Module):
    def __init__(self, rng, cfg=None):
        self.cfg = cfg = (cfg or EncoderConfig()).validate()
        self.mhsa = MultiHeadSelfAttention(rng, cfg.embed_dim, cfg.n_heads)
        c_in = [4] + list(cfg.widths[:2])
        self.stages = [SmoothNet(rng, ci, co) for ci, co in zip(c_in, cfg.widths)]

    def forward(self, voxels):
        """``[4, N_TB, H, W]`` -> feature maps at scales 1, 1/2, 1/4."""
        voxels = T.as_tensor(voxels)
        _, n_tb, h, w = voxels.shape
        if n_tb != self.cfg.n_time_bins:
            raise ValueError(f"encoder built for {self.cfg.n_time_bins} time bins, got {n_tb}")
        if h % 4 or w % 4:
            raise ValueError(f"spatial size {h}x{w} must be divisible by 4")
        x = self.mhsa(voxels)
        feats = []
        for i, stage in enumerate(self.stages):
            if i < 2:
                x = abs_pool_temporal(x)
            x = stage(x)
            c, t, hh, ww = x.shape
            feats.append(T.reshape(x, (c * t, hh, ww)))
            if i < 2:
                x = abs_pool_spatial(x)
        return feats
