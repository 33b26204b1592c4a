"""Moving-region filter built from event voxels, and the loss filter derived from it."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPS = 1e-8
DEFAULT_SIGMAS = (1.0, 2.0)


@dataclass
class RegionFilter:
    weights: np.ndarray          # [4, H, W] in [0, 1]
    sigmas: tuple = DEFAULT_SIGMAS


def activity(voxels):
    """Absolute sum over time bins: ``[4, N_TB, H, W] -> [4, H, W]``."""
    data = getattr(voxels, "data", voxels)
    return np.abs(data).sum(axis=1)


def normalize(act):
    """Scale each interval plane by ``1 / (max + EPS)``."""
    act = np.asarray(act, dtype=np.float64)
    peak = act.reshape(act.shape[0], -1).max(axis=1)
    return act / (peak + EPS)[:, None, None]


def gaussian_kernel(sigma):
    """Sampled 1-D Gaussian of radius ``ceil(3 sigma)``, normalised to sum 1."""
    r = int(math.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(plane, sigma):
    """Separable blur of the last two axes with reflect (edge-duplicating) borders."""
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = np.asarray(plane, dtype=np.float64)
    for axis in (-2, -1):
        n = out.shape[axis]
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        # symmetric padding repeats itself for radii wider than the plane
        padded = np.pad(out, pad, mode="symmetric") if r <= n else _wide_pad(out, r, axis)
        acc = np.zeros_like(out)
        for i, kv in enumerate(k):
            acc += kv * np.take(padded, np.arange(i, i + n), axis=axis)
        out = acc
    return out


def _wide_pad(a, r, axis):
    n = a.shape[axis]
    idx = np.arange(-r, n + r)
    period = 2 * n
    idx = np.mod(idx, period)
    idx = np.where(idx >= n, period - 1 - idx, idx)
    return np.take(a, idx, axis=axis)


def gaussian_cascade(normalized, sigmas=DEFAULT_SIGMAS):
    if len(sigmas) == 0 or any(s <= 0 for s in sigmas):
        raise ValueError(f"sigmas must be a non-empty list of positive values, got {sigmas}")
    out = np.asarray(normalized, dtype=np.float64)
    for s in sigmas:
        out = gaussian_blur(out, s)
    out = np.clip(normalize(np.maximum(out, 0.0)), 0.0, 1.0)
    return RegionFilter(out, tuple(sigmas))


def region_filter(voxels, sigmas=DEFAULT_SIGMAS):
    return gaussian_cascade(normalize(activity(voxels)), sigmas)


def apply_filter(frames, filt):
    """Weight frame ``i`` (all channels) by filter plane ``i``."""
    frames = np.asarray(frames, dtype=np.float64)
    w = getattr(filt, "weights", filt)
    if frames.ndim != 4 or frames.shape[0] != w.shape[0] or frames.shape[2:] != w.shape[1:]:
        raise ValueError(f"frames {frames.shape} do not match filter {w.shape}")
    return frames * w[:, None]


def loss_filter(filt):
    """Mean of the planes for the two intervals adjacent to the middle frame."""
    w = getattr(filt, "weights", filt)
    return (w[1] + w[2]) / 2.0
