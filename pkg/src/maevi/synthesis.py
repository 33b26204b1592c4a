"""SynBlocks: deformable multi-frame synthesis at three scales, and the two sister branches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv, Module


def tap_grid(size=3):
    r = size // 2
    return np.array([(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)], dtype=np.float64)


def bilinear_sample(image, y, x):
    return T.bilinear_sample(T.as_tensor(image), y, x)


def deformable_synthesize(frames, weights, offsets, taps=None):
    """``out[c,y,x] = sum_{i,k} w[i,k,y,x] * frames[i,c](y + g_k.y + dy, x + g_k.x + dx)``."""
    taps = tap_grid(3) if taps is None else np.asarray(taps, dtype=np.float64)
    return T.deform_sample(T.as_tensor(frames), T.as_tensor(weights), T.as_tensor(offsets), taps)


def fuse_scales(full, half, quarter):
    return T.add(T.add(full, T.bilinear_upsample(half, 2)), T.bilinear_upsample(quarter, 4))


def laplacian_bands(frames):
    """Split ``[N,C,H,W]`` frames into bands at scales 1, 1/2, 1/4.

    The bands are built so that ``fuse_scales`` of them returns the frames
    exactly: the quarter band is the 4x-averaged image and each finer band
    holds what the coarser ones miss.
    """
    l0 = T.Tensor(frames)
    l1 = T.avg_pool2d(l0, 2)
    l2 = T.avg_pool2d(l1, 2)
    b2 = l2.data
    b1 = l1.data - T.bilinear_upsample(l2, 2).data
    b0 = l0.data - T.bilinear_upsample(T.Tensor(b1), 2).data - T.bilinear_upsample(l2, 4).data
    return b0, b1, b2


class SynBlock(Module):
    """Predicts per-pixel kernel weights and offsets from features, then samples the frames."""

    def __init__(self, rng, feat_ch, hidden=12, n_frames=4, grid=3, max_offset=8.0, zero_head=True):
        self.taps = tap_grid(grid)
        self.n_frames = n_frames
        self.max_offset = float(max_offset)
        f = len(self.taps)
        self.hidden = Conv(rng, feat_ch, hidden, 3)
        self.weight_head = Conv(rng, hidden, n_frames * f, 1, zero=zero_head)
        self.offset_head = Conv(rng, hidden, n_frames * f * 2, 1, zero=zero_head)

    def kernel(self, feat):
        h, w = feat.shape[1:]
        f = len(self.taps)
        hid = T.leaky_relu(self.hidden(feat), 0.1)
        weights = T.reshape(T.softmax(self.weight_head(hid), axis=0), (self.n_frames, f, h, w))
        off = T.scale(T.tanh(self.offset_head(hid)), self.max_offset)
        return weights, T.reshape(off, (self.n_frames, f, 2, h, w))

    def forward(self, feat, frames):
        frames = T.as_tensor(frames)
        if feat.shape[1:] != frames.shape[2:]:
            raise ValueError(f"features {feat.shape} and frames {frames.shape} are not aligned")
        weights, offsets = self.kernel(feat)
        return T.deform_sample(frames, weights, offsets, self.taps)


@dataclass
class BranchOutput:
    full: T.Tensor
    half: T.Tensor
    quarter: T.Tensor
    fused: T.Tensor


class Branch(Module):
    """Three SynBlocks (scales 1, 1/2, 1/4) whose outputs are upsampled and summed."""

    def __init__(self, rng, feat_channels, hidden=12, grid=3, max_offset=8.0, zero_head=True):
        self.blocks = [SynBlock(rng, c, hidden, grid=grid, max_offset=max_offset / 2 ** i,
                                zero_head=zero_head)
                       for i, c in enumerate(feat_channels)]

    def forward(self, feats, bands):
        outs = [blk(f, b) for blk, f, b in zip(self.blocks, feats, bands)]
        return BranchOutput(*outs, fuse_scales(*outs))
