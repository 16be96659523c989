"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .params import ParamStore


def finite_diff_check(f, params: ParamStore, h: float = 1e-5) -> float:
    """Return the max over all parameter coordinates of

        |analytic - central_difference| / (|central_difference| + 1e-8)

    where the analytic gradient comes from one reverse pass of ``f(params)``
    and the central difference perturbs each coordinate by ``+-h``.
    ``f`` must be deterministic and return a scalar tensor.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_check: h must be positive, got {h}")

    params.zero_grad()
    loss = f(params)
    if loss.data.ndim != 0:
        raise ValueError(f"finite_diff_check: f must return a scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise FloatingPointError("finite_diff_check: f returned a non-finite value at the base point")
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(params).data)
            flat[i] = orig - h
            fm = float(f(params).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(
                    f"finite_diff_check: non-finite value while perturbing {name}[{i}]"
                )
            central = (fp - fm) / (2.0 * h)
            err = abs(grad_flat[i] - central) / (abs(central) + 1e-8)
            if err > worst:
                worst = err
    return worst
