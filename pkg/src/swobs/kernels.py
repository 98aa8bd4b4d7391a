"""Kernel dispatch: the compiled extension when it imports, numpy otherwise.

Set ``SWOBS_PURE_PYTHON=1`` to force the numpy path.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py
from ._kernels_py import vertex_norm_max

__all__ = ["BACKEND", "dissipation_scan", "vertex_norm_max", "available_backends"]

_compiled = None
if not os.environ.get("SWOBS_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "numpy"


def available_backends() -> dict:
    out = {"numpy": _kernels_py.dissipation_scan}
    if _compiled is not None:
        out["compiled"] = _compiled.dissipation_scan
    return out


def _prep(M0, P, lo, hi, rows, cols, G, W, phi):
    c = lambda a: np.ascontiguousarray(a, dtype=float)
    i = lambda a: np.ascontiguousarray(a, dtype=np.intp)
    return c(M0), c(P), c(lo), c(hi), i(rows), i(cols), c(G), c(W), c(phi)


def dissipation_scan(M0, P, lo, hi, rows, cols, G, W, phi, backend: str = None):
    """See :func:`swobs._kernels_py.dissipation_scan`."""
    fn = available_backends()[backend or BACKEND]
    return fn(*_prep(M0, P, lo, hi, rows, cols, G, W, phi))
