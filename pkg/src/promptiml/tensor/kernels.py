"""Backend selection for the hot kernels.

The compiled Cython module is used when it imports; otherwise (or when
``PROMPTIML_PURE_PYTHON`` is set to a non-empty value other than ``0``) the
numpy fallback is used.  Both expose ``bilinear_gather``, ``bilinear_scatter``
and ``col2im`` with identical semantics.
"""

import os

import numpy as np

from promptiml.tensor import _fallback

try:
    from promptiml.tensor import _ext
except ImportError:  # extension not built
    _ext = None

_force_pure = os.environ.get("PROMPTIML_PURE_PYTHON", "") not in ("", "0")
_impl = _fallback if (_ext is None or _force_pure) else _ext
BACKEND = "numpy" if _impl is _fallback else "cython"


def available_backends() -> dict:
    out = {"numpy": _fallback}
    if _ext is not None:
        out["cython"] = _ext
    return out


def bilinear_gather(value: np.ndarray, points: np.ndarray) -> np.ndarray:
    return _impl.bilinear_gather(np.ascontiguousarray(value),
                                 np.ascontiguousarray(points, dtype=value.dtype))


def bilinear_scatter(grad, value, points):
    dt = value.dtype
    return _impl.bilinear_scatter(np.ascontiguousarray(grad, dtype=dt), np.ascontiguousarray(value),
                                  np.ascontiguousarray(points, dtype=dt))


def col2im(dcols: np.ndarray, H: int, W: int, stride: int, pad: int) -> np.ndarray:
    return _impl.col2im(np.ascontiguousarray(dcols), H, W, stride, pad)
