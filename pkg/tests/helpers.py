import numpy as np

from maevi import tensor as T


def conv2d_loops(x, w, b, stride=1, pad=None):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    pad = (k - 1) // 2 if pad is None else pad
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            acc += w[o, c, di, dj] * xp[c, i * stride + di, j * stride + dj]
                out[o, i, j] = acc
    return out


def conv3d_loops(x, w, b):
    cin, t, h, wd = x.shape
    cout, _, kt, k, _ = w.shape
    pt, p = (kt - 1) // 2, (k - 1) // 2
    xp = np.zeros((cin, t + 2 * pt, h + 2 * p, wd + 2 * p))
    xp[:, pt:pt + t, p:p + h, p:p + wd] = x
    out = np.zeros((cout, t, h, wd))
    for o in range(cout):
        for a in range(t):
            for i in range(h):
                for j in range(wd):
                    acc = b[o]
                    for c in range(cin):
                        for da in range(kt):
                            for di in range(k):
                                for dj in range(k):
                                    acc += w[o, c, da, di, dj] * xp[c, a + da, i + di, j + dj]
                    out[o, a, i, j] = acc
    return out


def bilinear_loop(img, y, x):
    """Clamp-to-border bilinear lookup of one point."""
    c, h, w = img.shape
    y = min(max(y, 0.0), h - 1)
    x = min(max(x, 0.0), w - 1)
    y0 = min(int(np.floor(y)), max(h - 2, 0))
    x0 = min(int(np.floor(x)), max(w - 2, 0))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    return ((1 - fy) * (1 - fx) * img[:, y0, x0] + (1 - fy) * fx * img[:, y0, x1]
            + fy * (1 - fx) * img[:, y1, x0] + fy * fx * img[:, y1, x1])


def deform_loops(frames, weights, offsets, taps):
    n, c, h, w = frames.shape
    out = np.zeros((c, h, w))
    for y in range(h):
        for x in range(w):
            for i in range(n):
                for k, (ty, tx) in enumerate(taps):
                    sy = y + ty + offsets[i, k, 0, y, x]
                    sx = x + tx + offsets[i, k, 1, y, x]
                    out[:, y, x] += weights[i, k, y, x] * bilinear_loop(frames[i], sy, sx)
    return out


def rel_error(a, b, floor=1e-12):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, arr, h=1e-5, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (modified in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(arr.shape)


def check_grads(build, leaves, h=(1e-5, 1e-6, 1e-7), max_entries=None, rng=None, floor=1e-4):
    """Compare autodiff grads of scalar ``build()`` against central differences.

    Returns the worst relative error over ``leaves``.  With ``max_entries`` only
    that many random entries per leaf are differenced.  ``floor`` bounds the
    denominator so that leaves whose true gradient is exactly zero (a key bias
    under softmax, say) are judged by absolute differencing noise.

    ``h`` may be a sequence of steps and each entry keeps its best one.  The
    networks are piecewise smooth (ReLU, abs-pool, clamp, L1); a switch that
    falls inside one stencil spoils only that step, whereas a wrong gradient
    disagrees at every step.
    """
    steps = (h,) if np.isscalar(h) else tuple(h)
    for t in leaves:
        t.grad = None
    T.backward(build())
    worst = 0.0
    for t in leaves:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        if max_entries is not None and t.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(t.size, max_entries, replace=False)
        else:
            idx = np.arange(t.size)
        a = analytic.reshape(-1)[idx]
        nums = np.stack([numeric_grad(lambda: build().item(), t.data, step, idx).reshape(-1)[idx]
                         for step in steps])
        best = nums[np.argmin(np.abs(nums - a), axis=0), np.arange(len(idx))]
        worst = max(worst, rel_error(a, best, floor))
    return worst
