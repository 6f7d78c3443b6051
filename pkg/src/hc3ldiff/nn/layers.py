"""Differentiable layers with hand-written forward and backward passes.

Activations are channels-last: [N, H, W, C] feature maps or [N, F] vectors. Each layer caches
what its backward needs during a training-mode forward; ``backward`` consumes
that cache, accumulates parameter gradients into ``grads`` and returns the
input gradient(s).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

from ..errors import StateError
from ..grid import matmul


class Module:
    """Base for leaf layers and composite blocks."""

    kind = "module"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.sublayers: list[Module] = []
        self.training = True
        self._cache = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def leaves(self):
        if self.sublayers:
            for m in self.sublayers:
                yield from m.leaves()
        else:
            yield self

    def named_parameters(self):
        """Yield ("<leaf-index>.<param>", layer, key) in definition order."""
        for i, leaf in enumerate(self.leaves()):
            for key in leaf.params:
                yield f"{i}.{key}", leaf, key

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: layer.params[key] for name, layer, key in self.named_parameters()}

    def load_state_dict(self, state) -> None:
        expected = {name for name, _, _ in self.named_parameters()}
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, layer, key in self.named_parameters():
            value = np.asarray(state[name])
            if value.shape != layer.params[key].shape:
                raise ValueError(f"{name}: shape {value.shape} != {layer.params[key].shape}")
            layer.params[key] = value.astype(layer.params[key].dtype).copy()

    def grad_dict(self) -> dict[str, np.ndarray]:
        return {name: layer.grads[key] for name, layer, key in self.named_parameters()}

    def num_parameters(self) -> int:
        return sum(layer.params[key].size for _, layer, key in self.named_parameters())

    def zero_grad(self) -> None:
        for leaf in self.leaves():
            for key, p in leaf.params.items():
                leaf.grads[key] = np.zeros_like(p)

    def train(self, mode: bool = True):
        for m in self._all_modules():
            m.training = mode
            m._cache = None
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for leaf in self.leaves():
            for key in leaf.params:
                leaf.params[key] = leaf.params[key].astype(dtype)
                leaf.grads[key] = np.zeros_like(leaf.params[key])
        return self

    def _all_modules(self):
        yield self
        for m in self.sublayers:
            yield from m._all_modules()

    def _save(self, *items):
        if self.training:
            self._cache = items

    def _pop(self):
        if not self.training:
            raise StateError(f"{self.kind}: backward requires train mode")
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def _accumulate(self, key, g):
        if key in self.grads and self.grads[key].shape == g.shape:
            self.grads[key] += g
        else:
            self.grads[key] = g.astype(self.params[key].dtype, copy=True)


def he_normal(rng, shape, fan_in, dtype=np.float64):
    return (rng.normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    """Square-kernel convolution with padding k//2 and stride 1 or 2; weight is [k, k, cin, cout]."""

    kind = "conv"

    def __init__(self, cin, cout, rng, k=3, stride=1, zero_init=False, dtype=np.float64):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if k % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        shape = (k, k, cin, cout)
        if zero_init:
            self.params["weight"] = np.zeros(shape, dtype=dtype)
        else:
            self.params["weight"] = he_normal(rng, shape, cin * k * k, dtype)
        self.params["bias"] = np.zeros(cout, dtype=dtype)
        self.zero_grad()

    def forward(self, x):
        n, h, w, c = x.shape
        if c != self.cin:
            raise ValueError(f"conv expects {self.cin} channels, got {c}")
        k, s, p = self.k, self.stride, self.k // 2
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if k == 1 and s == 1:
            cols = x.reshape(-1, c)
        else:
            xp = np.ascontiguousarray(np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))))
            sn, sh, sw, sc = xp.strides
            win = as_strided(xp, (n, ho, wo, k, k, c), (sn, s * sh, s * sw, sh, sw, sc), writeable=False)
            cols = win.reshape(n * ho * wo, k * k * c)
        out = matmul(cols, self.params["weight"].reshape(-1, self.cout)) + self.params["bias"]
        self._save(cols, x.shape)
        return out.reshape(n, ho, wo, self.cout)

    def backward(self, dy):
        cols, xshape = self._pop()
        n, h, w, c = xshape
        k, s, p = self.k, self.stride, self.k // 2
        ho, wo = dy.shape[1:3]
        dyf = dy.reshape(-1, self.cout)
        wmat = self.params["weight"].reshape(-1, self.cout)
        self._accumulate("weight", matmul(cols.T, dyf).reshape(self.params["weight"].shape))
        self._accumulate("bias", dyf.sum(axis=0))
        dcols = matmul(dyf, wmat.T)
        if k == 1 and s == 1:
            return dcols.reshape(xshape)
        dcols = dcols.reshape(n, ho, wo, k, k, c)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += dcols[:, :, :, i, j, :]
        return dxp[:, p : p + h, p : p + w, :]


class Upsample2x(Module):
    kind = "nearest_upsample_2x"

    def forward(self, x):
        self._save(x.shape)
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, dy):
        (shape,) = self._pop()
        n, h, w, c = shape
        return dy.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))


class SiLU(Module):
    kind = "silu"

    def forward(self, x):
        sig = expit(x)
        self._save(x, sig)
        return x * sig

    def backward(self, dy):
        x, sig = self._pop()
        return dy * (sig * (1.0 + x * (1.0 - sig)))


class Tanh(Module):
    kind = "tanh"

    def forward(self, x):
        y = np.tanh(x)
        self._save(y)
        return y

    def backward(self, dy):
        (y,) = self._pop()
        return dy * (1.0 - y * y)


class GroupNorm(Module):
    """Normalizes each (sample, channel group) over space and the group's channels."""

    kind = "group_norm"

    def __init__(self, channels, groups=4, eps=1e-5, dtype=np.float64):
        super().__init__()
        groups = min(groups, channels)
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible into {groups} groups")
        self.channels, self.groups, self.eps = channels, groups, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.zero_grad()

    def _grouped(self, x):
        return x.reshape(x.shape[0], -1, self.groups, self.channels // self.groups)

    @staticmethod
    def _group_sum(a):
        # reduce the long spatial axis first; numpy is slow reducing (1, 3) jointly
        return a.sum(axis=1, keepdims=True).sum(axis=3, keepdims=True)

    def normalize(self, x):
        xg = self._grouped(x)
        m = xg.shape[1] * xg.shape[3]
        mean = self._group_sum(xg) / m
        xc = xg - mean
        var = self._group_sum(xc * xc) / m
        inv_std = 1.0 / np.sqrt(var + self.eps)
        return (xc * inv_std).reshape(x.shape), inv_std

    def forward(self, x):
        if x.shape[-1] != self.channels:
            raise ValueError(f"group_norm expects {self.channels} channels, got {x.shape[-1]}")
        xhat, inv_std = self.normalize(x)
        self._save(xhat, inv_std)
        return xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, dy):
        xhat, inv_std = self._pop()
        axes = tuple(range(dy.ndim - 1))
        self._accumulate("gamma", (dy * xhat).sum(axis=axes))
        self._accumulate("beta", dy.sum(axis=axes))
        dxhat = self._grouped(dy * self.params["gamma"])
        xg = self._grouped(xhat)
        m = xg.shape[1] * xg.shape[3]
        dx = inv_std / m * (m * dxhat - self._group_sum(dxhat) - xg * self._group_sum(dxhat * xg))
        return dx.reshape(dy.shape)


class Dense(Module):
    kind = "dense"

    def __init__(self, fin, fout, rng, zero_init=False, dtype=np.float64):
        super().__init__()
        self.fin, self.fout = fin, fout
        if zero_init:
            self.params["weight"] = np.zeros((fout, fin), dtype=dtype)
        else:
            self.params["weight"] = he_normal(rng, (fout, fin), fin, dtype)
        self.params["bias"] = np.zeros(fout, dtype=dtype)
        self.zero_grad()

    def forward(self, x):
        self._save(x)
        return matmul(x, self.params["weight"].T) + self.params["bias"]

    def backward(self, dy):
        (x,) = self._pop()
        self._accumulate("weight", matmul(dy.T, x))
        self._accumulate("bias", dy.sum(axis=0))
        return matmul(dy, self.params["weight"])


class ResidualAdd(Module):
    kind = "residual_add"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"residual_add shape mismatch {a.shape} vs {b.shape}")
        self._save(True)
        return a + b

    def backward(self, dy):
        self._pop()
        return dy, dy


class ChannelConcat(Module):
    kind = "channel_concat"

    def forward(self, *xs):
        self._save([x.shape[-1] for x in xs])
        return np.concatenate(xs, axis=-1)

    def backward(self, dy):
        (sizes,) = self._pop()
        return tuple(np.split(dy, np.cumsum(sizes)[:-1], axis=-1))


class TimeEmbedInject(Module):
    """Per-channel addition of a [N, C] embedding onto a [N, H, W, C] feature map."""

    kind = "time_embed_inject"

    def forward(self, h, emb):
        if emb.shape != (h.shape[0], h.shape[-1]):
            raise ValueError(f"embedding shape {emb.shape} does not match features {h.shape}")
        self._save(True)
        return h + emb[:, None, None, :]

    def backward(self, dy):
        self._pop()
        return dy, dy.sum(axis=(1, 2))


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Interleaved (sin(t*w_k), cos(t*w_k)) pairs with w_k = 10000**(-2k/dim).

    ``t`` may be a scalar (returns [dim]) or a vector (returns [len(t), dim]).
    """
    if dim % 2:
        raise ValueError("embedding dim must be even")
    t_arr = np.asarray(t, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    angles = t_arr[..., None] * omega
    out = np.empty(t_arr.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def time_embedding(t, dim: int) -> np.ndarray:
    return sinusoidal_embedding(t, dim)
