"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from promptiml.tensor.core import Tensor, no_grad


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def _coords(size: int, max_coords: int | None, rng: np.random.Generator | None) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    rng = rng if rng is not None else np.random.default_rng(0)
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def check_leaves(loss: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-6,
                 max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between backprop and central differences over ``leaves``.

    ``loss`` is re-evaluated with each leaf coordinate perturbed in place, so it
    must read the leaves directly (model parameters, closed-over inputs).
    """
    rng = np.random.default_rng(seed)
    for t in leaves:
        t.grad = None
    out = loss()
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]

    worst = 0.0
    with no_grad():
        for t, ga in zip(leaves, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in _coords(flat.size, max_coords, rng):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(loss().data)
                flat[i] = orig - eps
                fm = float(loss().data)
                flat[i] = orig
                worst = max(worst, _rel_err(float(gflat[i]), (fp - fm) / (2 * eps)))
    return worst


def finite_diff_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Compare d fn / d x from backprop with central differences, coordinate-wise.

    Relative error per coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``; the
    maximum over the checked coordinates is returned.
    """
    if not x.requires_grad:
        x = Tensor(x.data.copy(), requires_grad=True)
    return check_leaves(lambda: fn(x), [x], eps=eps, max_coords=max_coords, seed=seed)
