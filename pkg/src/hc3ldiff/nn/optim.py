"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, weight_decay=0.01, eps=1e-8):
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.weight_decay, self.eps = weight_decay, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def update(self, params: dict, grads: dict) -> dict:
        """Return new parameter arrays; inputs are not modified."""
        if params.keys() != grads.keys():
            raise ValueError("params and grads have different names")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        out = {}
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            new = p - self.lr * self.weight_decay * p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            out[name] = new.astype(p.dtype)
        return out

    def step(self, module) -> None:
        """Update a module's parameters in place from its accumulated gradients."""
        names = [(name, layer, key) for name, layer, key in module.named_parameters()]
        new = self.update({n: l.params[k] for n, l, k in names}, {n: l.grads[k] for n, l, k in names})
        for n, layer, key in names:
            layer.params[key] = new[n]


def adamw_update(state: AdamW, params: dict, grads: dict) -> dict:
    return state.update(params, grads)
