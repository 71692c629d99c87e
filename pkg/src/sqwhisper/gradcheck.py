"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, 1e-8), taken over all coordinates."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_gradient(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5,
                     coords: Sequence[int] | None = None) -> np.ndarray:
    """Perturb ``x.data`` in place coordinate by coordinate and difference ``f``.

    ``coords`` restricts the sweep to a subset of flat indices; the rest of
    the returned array stays zero.
    """
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    indices = range(flat.size) if coords is None else coords
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(f().data)
        flat[i] = orig - eps
        minus = float(f().data)
        flat[i] = orig
        out[i] = (plus - minus) / (2 * eps)
    return out.reshape(x.shape)


def finite_difference_check(f: Callable[[], Tensor], inputs: Tensor | Sequence[Tensor],
                            eps: float = 1e-5, max_coords: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` takes no arguments and rebuilds the graph from the current values of
    ``inputs`` (which must have ``requires_grad=True``).  With ``max_coords``
    only a random subset of coordinates per input is probed.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for x in inputs:
        x.grad = None
    loss = f()
    if loss.data.size != 1:
        raise ValueError("finite_difference_check needs a scalar-valued function")
    loss.backward()
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for x in inputs:
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)
        coords = None
        if max_coords is not None and x.data.size > max_coords:
            coords = np.sort(rng.choice(x.data.size, size=max_coords, replace=False))
        numeric = numeric_gradient(f, x, eps, coords)
        if coords is not None:
            analytic = analytic.reshape(-1)[coords]
            numeric = numeric.reshape(-1)[coords]
        worst = max(worst, relative_error(analytic, numeric))
    return worst
