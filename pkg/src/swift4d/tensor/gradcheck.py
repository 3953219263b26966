"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor, no_grad


def numerical_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place).

    ``coords`` restricts the probe to a subset of flat indices; other entries
    of the result stay NaN.
    """
    x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    indices = range(flat.size) if coords is None else coords
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` is called with no arguments when ``x`` is a sequence of tensors that
    ``f`` closes over, or with ``x`` itself when a single tensor (or a plain
    array, which is wrapped) is given.
    With ``max_coords`` set, at most that many coordinates per tensor are
    probed (sampled with ``rng``); use this for large parameter sets.
    """
    if isinstance(x, np.ndarray):
        x = Tensor(x.astype(np.float64, copy=True))
    tensors = [x] if isinstance(x, Tensor) else list(x)
    call = (lambda: f(tensors[0])) if isinstance(x, Tensor) else f
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires double precision tensors")
        t.requires_grad = True
        t.grad = None
    loss = call()
    if loss.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {loss.shape}")
    loss.backward()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = rng.choice(t.size, size=max_coords, replace=False)
        numeric = numerical_grad(call, t, eps=eps, coords=coords)
        a = analytic.reshape(-1)
        n = numeric.reshape(-1)
        probe = np.arange(t.size) if coords is None else coords
        err = np.abs(a[probe] - n[probe]) / np.maximum(1.0, np.abs(n[probe]))
        if not np.all(np.isfinite(err)):
            return float("inf")
        worst = max(worst, float(err.max()))
    return worst
