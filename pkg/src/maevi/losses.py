"""Motion-aware training loss and image quality metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T

INF = float("inf")


@dataclass
class LossConfig:
    alpha: float = 0.6

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        return self


def _broadcast_filter(lf, like):
    lf = np.asarray(getattr(lf, "data", lf), dtype=np.float64)
    if lf.shape != like.shape[-2:]:
        raise T.ShapeError(f"loss filter {lf.shape} does not match image {like.shape}")
    return T.Tensor(np.broadcast_to(lf, like.shape).copy())


def loss_terms(pred, gt, lf):
    """``(L_filtered, L_full)`` as scalar tensors."""
    gt = T.as_tensor(gt)
    if pred.shape != gt.shape:
        raise T.ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    lfb = _broadcast_filter(lf, pred)
    full = T.l1_mean(pred, gt)
    filtered = T.l1_mean(T.mul(lfb, pred), T.mul(lfb, gt))
    return filtered, full


def motion_aware_loss(pred, gt, lf, cfg=None):
    """``alpha * L_filtered + (1 - alpha) * L_full`` with mean-reduced L1 terms."""
    alpha = (cfg or LossConfig()).validate().alpha
    filtered, full = loss_terms(pred, gt, lf)
    return T.add(T.scale(filtered, alpha), T.scale(full, 1.0 - alpha))


def psnr(a, b, peak=1.0):
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return INF
    return 10.0 * math.log10(peak * peak / mse)


def masked_psnr(a, b, lf, peak=1.0, threshold=0.5):
    """PSNR over the pixels where the loss filter exceeds ``threshold`` (all channels)."""
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    mask = np.asarray(getattr(lf, "data", lf)) > threshold
    if a.shape != b.shape or mask.shape != a.shape[-2:]:
        raise ValueError(f"shape mismatch: {a.shape}, {b.shape}, mask {mask.shape}")
    if not mask.any():
        raise ValueError("masked_psnr: mask selects no pixels")
    mse = float(np.mean((a[..., mask] - b[..., mask]) ** 2))
    if mse == 0.0:
        return INF
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img, g):
    n = len(g)
    h, w = img.shape
    rows = sum(g[i] * img[i:h - n + 1 + i] for i in range(n))
    return sum(g[j] * rows[:, j:w - n + 1 + j] for j in range(n))


def ssim(a, b, peak=1.0, window=11, sigma=1.5):
    """Mean SSIM over all fully-contained Gaussian windows of the channel-mean images."""
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(axis=0), b.mean(axis=0)
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    g = _gaussian_window(window, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
