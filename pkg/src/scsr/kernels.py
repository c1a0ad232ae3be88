"""Kernel dispatch: compiled extension when importable, numpy fallback otherwise.

Set ``SCSR_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("SCSR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def centile_rows(values, q, backend=None):
    impl = _select(backend)
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("values must be a 2-d array")
    return impl.centile_rows(values, float(q))


def hop_voronoi(indptr, indices, seeds, backend=None):
    impl = _select(backend)
    return impl.hop_voronoi(
        np.ascontiguousarray(indptr, dtype=np.int64),
        np.ascontiguousarray(indices, dtype=np.int64),
        np.ascontiguousarray(seeds, dtype=np.int64),
    )


def available_backends():
    out = ["python"]
    if BACKEND == "cython" or _cython_importable():
        out.append("cython")
    return out


def _cython_importable():
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _pykernels
    if backend == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {backend!r}")
