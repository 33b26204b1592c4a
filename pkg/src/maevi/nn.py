"""Minimal parameter containers on top of :mod:`maevi.tensor`."""
from __future__ import annotations

import numpy as np

from . import tensor as T


class Module:
    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, T.Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_init(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return T.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv(Module):
    """2-D or 3-D same-padded convolution with bias."""

    def __init__(self, rng, c_in, c_out, kernel, dims=2, zero=False):
        shape = (c_out, c_in) + (kernel,) * dims
        fan_in = c_in * kernel ** dims
        if zero:
            self.weight = T.Tensor(np.zeros(shape), requires_grad=True)
            self.bias = T.Tensor(np.zeros(c_out), requires_grad=True)
        else:
            self.weight = uniform_init(rng, shape, fan_in)
            self.bias = uniform_init(rng, (c_out,), fan_in)
        self.dims = dims

    def forward(self, x):
        fn = T.conv2d if self.dims == 2 else T.conv3d
        return fn(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, rng, n_in, n_out, zero=False):
        if zero:
            self.weight = T.Tensor(np.zeros((n_in, n_out)), requires_grad=True)
            self.bias = T.Tensor(np.zeros(n_out), requires_grad=True)
        else:
            self.weight = uniform_init(rng, (n_in, n_out), n_in)
            self.bias = uniform_init(rng, (n_out,), n_in)

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)
