"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np


def numerical_gradient(f, x: np.ndarray, h=1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place and restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    """Max entrywise error, each entry scaled by its own magnitude.

    The denominator is floored at 1e-3 of the tensor's largest gradient and at
    1e-8 absolute, so round-off on exactly-zero gradients does not count.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(1e-3 * scale, 1e-8))
    return float(np.max(np.abs(a - n) / denom))


def check_module(module, inputs, extra_backward_inputs=(), h=1e-5, rng=None, max_entries=None):
    """Compare analytic vs numeric gradients for inputs and parameters of ``module``.

    The scalar objective is sum(w * module(*inputs)) for a fixed random ``w``.
    Returns {name: relative error}.
    """
    rng = rng or np.random.default_rng(0)
    module.train()
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    out = module.forward(*inputs)
    if isinstance(out, tuple):
        out = out[0]
    w = rng.standard_normal(out.shape)

    def objective():
        y = module.forward(*inputs)
        if isinstance(y, tuple):
            y = y[0]
        return float(np.sum(w * y))

    module.zero_grad()
    module.forward(*inputs)
    grads_in = module.backward(w)
    if not isinstance(grads_in, tuple):
        grads_in = (grads_in,)
    analytic_params = {name: layer.grads[key].copy() for name, layer, key in module.named_parameters()}

    def pick(arr):
        if max_entries is None or arr.size <= max_entries:
            return None
        return rng.choice(arr.size, size=max_entries, replace=False)

    errors = {}
    for i, (x, gx) in enumerate(zip(inputs, grads_in)):
        if gx is None:
            continue
        sel = pick(x)
        num = numerical_gradient(objective, x, h, sel)
        if sel is None:
            errors[f"input{i}"] = relative_error(gx, num)
        else:
            errors[f"input{i}"] = relative_error(gx.ravel()[sel], num.ravel()[sel])
    for name, layer, key in module.named_parameters():
        p = layer.params[key]
        sel = pick(p)
        num = numerical_gradient(objective, p, h, sel)
        a = analytic_params[name]
        errors[name] = relative_error(a if sel is None else a.ravel()[sel], num if sel is None else num.ravel()[sel])
    return errors
