"""Dense float64 tensors with tape-style reverse-mode autodiff.

Every op builds its output through :func:`_node`, which records the parents
and a closure that maps the output gradient to parent gradients.  The graph
lives only as long as the tensors referencing it; ``backward`` walks it once
in reverse topological order.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise FloatingPointError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    """Wrap ``data`` as the output of ``op``; ``backward_fn(g)`` returns one grad per parent."""
    if not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss):
    """Populate ``.grad`` of every tensor in the graph of scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
        # tape semantics: release the recorded graph once it has been used
        node._parents = ()
        node._backward = None


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        t, c = (a, b) if isinstance(a, Tensor) else (b, a)
        c = float(c)
        return _node(t.data + c, (t,), lambda g: (g,), "add_scalar")
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    if not isinstance(a, Tensor):
        return add(scale(b, -1.0), float(a))
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        t, c = (a, b) if isinstance(a, Tensor) else (b, a)
        return scale(t, c)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c):
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a):
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope=0.1):
    factor = np.where(a.data > 0, 1.0, slope)
    return _node(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(a):
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a):
    t = np.tanh(a.data)
    return _node(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def clamp(a, lo=0.0, hi=1.0):
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def softmax(a, axis=-1):
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), bw, "softmax")


def sum_all(a):
    shape = a.shape
    return _node(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a):
    n = a.data.size
    shape = a.shape
    return _node(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def l1_mean(a, b):
    """Mean absolute difference; the subgradient at an exact tie is 0."""
    b = as_tensor(b)
    _same_shape(a, b, "l1_mean")
    d = a.data - b.data
    n = d.size
    sgn = np.sign(d)

    def bw(g):
        ga = sgn * (float(g) / n)
        return ga, -ga

    return _node(np.array(np.abs(d).mean()), (a, b), bw, "l1_mean")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape):
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors, axis=0):
    tensors = list(tensors)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def take(a, index, axis=0):
    """Select a single index along ``axis`` (dropping that axis)."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return _node(np.take(a.data, index, axis=axis), (a,), bw, "take")


def gather_rows(a, index):
    """``out[i] = a[index[i]]`` along the first axis; gradients scatter-add back."""
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), bw, "gather_rows")


# ---------------------------------------------------------------- contractions

def einsum(spec, a, b):
    """Two-operand einsum; each operand index must appear in the output or the other operand."""
    lhs, out = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    data = np.einsum(spec, a.data, b.data, optimize=True)

    def bw(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return _node(data, (a, b), bw, "einsum")


def matmul(a, b):
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} @ {bd.shape}")

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _node(ad @ bd, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """``x[..., in] @ weight[in, out] + bias[out]``."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: input features {xd.shape[-1]} != weight rows {wd.shape[0]}")
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd.T) if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(out, parents, bw, "linear")


# ---------------------------------------------------------------- convolutions

def _check_conv(x, w, spatial, op):
    if x.ndim != spatial + 1 or w.ndim != spatial + 2:
        raise ShapeError(f"{op}: expected input rank {spatial + 1} and weight rank {spatial + 2}, "
                         f"got {x.shape} and {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"{op}: input has {x.shape[0]} channels, weight expects {w.shape[1]}")
    for k in w.shape[2:]:
        if k % 2 != 1:
            raise ShapeError(f"{op}: kernel size {k} is not odd")


def _convnd(x, weight, bias, stride, padding, spatial, op):
    _check_conv(x, weight, spatial, op)
    ksize = weight.shape[2:]
    stride = (stride,) * spatial if np.isscalar(stride) else tuple(stride)
    padding = (padding,) * spatial if np.isscalar(padding) else tuple(padding)
    pad = [(0, 0)] + [(p, p) for p in padding]
    xp = np.pad(x.data, pad) if any(padding) else x.data
    axes = tuple(range(1, spatial + 1))
    win = sliding_window_view(xp, ksize, axis=axes)
    win = win[(slice(None),) + tuple(slice(None, None, s) for s in stride)]
    out_sp = win.shape[1:spatial + 1]
    if any(n <= 0 for n in out_sp):
        raise ShapeError(f"{op}: kernel {ksize} larger than padded input {xp.shape[1:]}")
    # win: [C_in, *out, *k] ; weight: [C_out, C_in, *k]
    cin = x.shape[0]
    kprod = int(np.prod(ksize))
    n_out = int(np.prod(out_sp))
    cols = np.moveaxis(win, 0, spatial).reshape(n_out, cin * kprod)
    wmat = weight.data.reshape(weight.shape[0], cin * kprod)
    out = (wmat @ cols.T).reshape((weight.shape[0],) + out_sp)
    if bias is not None:
        out += bias.data.reshape((-1,) + (1,) * spatial)
    parents = (x, weight) if bias is None else (x, weight, bias)
    xshape = xp.shape

    def bw(g):
        gmat = g.reshape(g.shape[0], n_out)
        gw = (gmat @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xshape)
            # scatter each kernel tap back onto the padded input
            for off in np.ndindex(*ksize):
                contrib = np.tensordot(weight.data[(slice(None), slice(None)) + off], g, axes=(0, 0))
                sl = (slice(None),) + tuple(
                    slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, stride, out_sp))
                gxp[sl] += contrib
            crop = (slice(None),) + tuple(slice(p, xshape[i + 1] - p) for i, p in enumerate(padding))
            gx = gxp[crop]
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=1)

    return _node(out, parents, bw, op)


def conv2d(x, weight, bias=None, stride=1, padding=None):
    """Cross-correlation of ``x[C_in,H,W]`` with ``weight[C_out,C_in,k,k]``; same padding by default."""
    if padding is None:
        padding = tuple((k - 1) // 2 for k in weight.shape[2:])
    return _convnd(x, weight, bias, stride, padding, 2, "conv2d")


def conv3d(x, weight, bias=None, stride=1, padding=None):
    """3-D analogue of :func:`conv2d` over ``x[C_in,T,H,W]``."""
    if padding is None:
        padding = tuple((k - 1) // 2 for k in weight.shape[2:])
    return _convnd(x, weight, bias, stride, padding, 3, "conv3d")


# ---------------------------------------------------------------- resampling

def _upsample_matrix(n, factor):
    """Bilinear (half-pixel centred, edge clamped) interpolation matrix of shape [n*factor, n]."""
    m = np.zeros((n * factor, n))
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    rows = np.arange(n * factor)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def _pool_matrix(n, factor):
    if n % factor:
        raise ShapeError(f"extent {n} not divisible by {factor}")
    m = np.zeros((n // factor, n))
    for i in range(n // factor):
        m[i, i * factor:(i + 1) * factor] = 1.0 / factor
    return m


def _separable(a, mh, mw, op):
    d = a.data
    out = np.einsum("ih,...hw,jw->...ij", mh, d, mw, optimize=True)

    def bw(g):
        return (np.einsum("ih,...ij,jw->...hw", mh, g, mw, optimize=True),)

    return _node(out, (a,), bw, op)


def bilinear_upsample(a, factor):
    """Upsample the last two axes by an integer factor (half-pixel centres, clamp to edge)."""
    factor = int(factor)
    if factor == 1:
        return a
    h, w = a.shape[-2:]
    return _separable(a, _upsample_matrix(h, factor), _upsample_matrix(w, factor), "bilinear_upsample")


def avg_pool2d(a, factor):
    h, w = a.shape[-2:]
    return _separable(a, _pool_matrix(h, factor), _pool_matrix(w, factor), "avg_pool2d")


# ---------------------------------------------------------------- pooling

def abs_pool(a, windows):
    """Pool each window to the original signed entry of largest magnitude.

    ``windows`` gives the window length per axis (1 = untouched).  Ties go to
    the first entry in row-major window order.
    """
    windows = tuple(int(w) for w in windows)
    if len(windows) != a.ndim:
        raise ShapeError(f"abs_pool: {len(windows)} windows for rank-{a.ndim} tensor")
    for n, w in zip(a.shape, windows):
        if w < 1 or n % w:
            raise ShapeError(f"abs_pool: extent {n} not divisible by window {w}")
    nd = a.ndim
    split = []
    for n, w in zip(a.shape, windows):
        split += [n // w, w]
    x = a.data.reshape(split)
    perm = list(range(0, 2 * nd, 2)) + list(range(1, 2 * nd, 2))
    xw = x.transpose(perm)
    out_shape = xw.shape[:nd]
    flat = xw.reshape(out_shape + (-1,))
    idx = np.abs(flat).argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    inv = np.argsort(perm)
    in_shape = a.shape

    def bw(g):
        gf = np.zeros(flat.shape)
        np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        return (gf.reshape(xw.shape).transpose(inv).reshape(in_shape),)

    return _node(out, (a,), bw, "abs_pool")


# ---------------------------------------------------------------- sampling

def _bilinear_parts(h, w, y, x):
    yc = np.clip(y, 0.0, h - 1)
    xc = np.clip(x, 0.0, w - 1)
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(h - 2, 0))
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = yc - y0
    fx = xc - x0
    # clamped coordinates carry no gradient
    iny = (y >= 0) & (y <= h - 1)
    inx = (x >= 0) & (x <= w - 1)
    return y0, y1, x0, x1, fy, fx, iny, inx


def bilinear_sample(image, y, x):
    """Sample ``image[C,H,W]`` at real coordinates ``y``, ``x`` (same shape) -> ``[C, *y.shape]``.

    Coordinates are clamped to ``[0, H-1] x [0, W-1]`` before interpolation.
    """
    y, x = as_tensor(y), as_tensor(x)
    _same_shape(y, x, "bilinear_sample")
    c, h, w = image.shape
    y0, y1, x0, x1, fy, fx, iny, inx = _bilinear_parts(h, w, y.data, x.data)
    img = image.data
    v00, v01 = img[:, y0, x0], img[:, y0, x1]
    v10, v11 = img[:, y1, x0], img[:, y1, x1]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def bw(g):
        gimg = None
        if image.requires_grad:
            flat = np.zeros((c, h * w))
            for idx, wt in (((y0, x0), w00), ((y0, x1), w01), ((y1, x0), w10), ((y1, x1), w11)):
                lin = (idx[0] * w + idx[1]).ravel()
                contrib = (g * wt).reshape(c, -1)
                for ch in range(c):
                    flat[ch] += np.bincount(lin, weights=contrib[ch], minlength=h * w)
            gimg = flat.reshape(c, h, w)
        gy = ((v10 - v00) * (1 - fx) + (v11 - v01) * fx) * g
        gx = ((v01 - v00) * (1 - fy) + (v11 - v10) * fy) * g
        return gimg, gy.sum(axis=0) * iny, gx.sum(axis=0) * inx

    return _node(out, (image, y, x), bw, "bilinear_sample")


def deform_sample(frames, weights, offsets, taps):
    """Weighted deformable sampling of several frames.

    ``frames[N,C,H,W]``, ``weights[N,F,H,W]``, ``offsets[N,F,2,H,W]`` (dy, dx),
    ``taps`` an ``[F,2]`` integer grid.  Returns
    ``out[c,y,x] = sum_{n,k} weights[n,k,y,x] * frames[n,c](y+ty_k+dy, x+tx_k+dx)``.
    """
    n, c, h, w = frames.shape
    f = len(taps)
    if weights.shape != (n, f, h, w) or offsets.shape != (n, f, 2, h, w):
        raise ShapeError(f"deform_sample: frames {frames.shape}, weights {weights.shape}, "
                         f"offsets {offsets.shape} inconsistent with {f} taps")
    taps = np.asarray(taps, dtype=np.float64)
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ys = gy + taps[:, 0, None, None] + offsets.data[:, :, 0]   # [N,F,H,W]
    xs = gx + taps[:, 1, None, None] + offsets.data[:, :, 1]
    y0, y1, x0, x1, fy, fx, iny, inx = _bilinear_parts(h, w, ys, xs)
    fr = frames.data.reshape(n, c, h * w)
    base = (np.arange(n) * (h * w))[:, None, None, None]
    flat = fr.transpose(1, 0, 2).reshape(c, n * h * w)
    i00 = base + y0 * w + x0
    i01 = base + y0 * w + x1
    i10 = base + y1 * w + x0
    i11 = base + y1 * w + x1
    v00, v01, v10, v11 = (np.take(flat, i, axis=1) for i in (i00, i01, i10, i11))  # [C,N,F,H,W]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    samples = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    wd = weights.data
    out = np.einsum("cnkyx,nkyx->cyx", samples, wd)

    def bw(g):
        gw = np.einsum("cnkyx,cyx->nkyx", samples, g, optimize=True) if weights.requires_grad else None
        gs = wd[None] * g[:, None, None]                              # [C,N,F,H,W]
        gframes = None
        if frames.requires_grad:
            acc = np.zeros((c, n * h * w))
            for idx, wt in ((i00, w00), (i01, w01), (i10, w10), (i11, w11)):
                lin = idx.ravel()
                contrib = (gs * wt).reshape(c, -1)
                for ch in range(c):
                    acc[ch] += np.bincount(lin, weights=contrib[ch], minlength=n * h * w)
            gframes = acc.reshape(c, n, h, w).transpose(1, 0, 2, 3)
        goff = None
        if offsets.requires_grad:
            dy = ((v10 - v00) * (1 - fx) + (v11 - v01) * fx)
            dx = ((v01 - v00) * (1 - fy) + (v11 - v10) * fy)
            goff = np.empty(offsets.shape)
            goff[:, :, 0] = (dy * gs).sum(axis=0) * iny
            goff[:, :, 1] = (dx * gs).sum(axis=0) * inx
        return gframes, gw, goff

    return _node(out, (frames, weights, offsets), bw, "deform_sample")
