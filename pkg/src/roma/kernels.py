"""Kernel backend selection.

The compiled extension ``roma._core`` is used when it imports; otherwise,
or when ``ROMA_PURE_PYTHON`` is set to a non-empty value other than ``0``,
the numpy implementation in ``roma._core_py`` is used.  ``BACKEND`` names
the active choice.
"""
from __future__ import annotations

import os

import numpy as np

from . import _core_py

try:
    from . import _core as _compiled
except ImportError:  # extension not built
    _compiled = None


def _want_pure() -> bool:
    return os.environ.get("ROMA_PURE_PYTHON", "") not in ("", "0")


if _compiled is not None and not _want_pure():
    _impl = _compiled
    BACKEND = "compiled"
else:
    _impl = _core_py
    BACKEND = "python"


def backends() -> dict:
    """All importable backends by name."""
    out = {"python": _core_py}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out


def get_backend(name: str | None = None):
    if name is None:
        return _impl
    try:
        return backends()[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available") from None


def _sizes(sizes) -> np.ndarray:
    return np.ascontiguousarray(sizes, dtype=np.intp)


def value_input_grad(theta, sizes, X, backend=None):
    impl = get_backend(backend)
    return impl.value_input_grad(np.ascontiguousarray(theta, dtype=np.float64), _sizes(sizes),
                                 np.ascontiguousarray(X, dtype=np.float64))


def adapt_value_grad(theta, sizes, X, f_prev, alpha, grad_weight=1.0, eps_num=1e-12,
                     backend=None):
    impl = get_backend(backend)
    return impl.adapt_value_grad(np.ascontiguousarray(theta, dtype=np.float64), _sizes(sizes),
                                 np.ascontiguousarray(X, dtype=np.float64),
                                 np.ascontiguousarray(f_prev, dtype=np.float64),
                                 float(alpha), float(grad_weight), float(eps_num))


def adapt_pgd(anchor, sizes, start, X, f_prev, alpha, grad_weight, epsilon, step, n_steps,
              eps_num=1e-12, track=False, backend=None):
    impl = get_backend(backend)
    return impl.adapt_pgd(np.ascontiguousarray(anchor, dtype=np.float64), _sizes(sizes),
                          np.ascontiguousarray(start, dtype=np.float64),
                          np.ascontiguousarray(X, dtype=np.float64),
                          np.ascontiguousarray(f_prev, dtype=np.float64),
                          float(alpha), float(grad_weight), float(epsilon), float(step),
                          int(n_steps), float(eps_num), bool(track))
