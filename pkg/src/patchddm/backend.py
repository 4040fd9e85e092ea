"""Kernel backend selection.

Two interchangeable implementations of the conv3d kernels exist:

* ``compiled`` -- Cython extension (:mod:`patchddm._conv3d`), float32 only,
  direct loops with no large temporaries.
* ``numpy``   -- im2col + BLAS matmul (:mod:`patchddm.kernels_numpy`), any
  dtype, faster wherever a tuned BLAS is present (it is with numpy), at the
  price of a k^3-fold transient input expansion.

The environment variable ``PATCHDDM_KERNELS`` picks one (``auto``,
``compiled`` or ``numpy``). ``auto`` selects numpy: benchmarks at this
package's working sizes (8..16 channels, 16^3..32^3 voxels; see
benchmarks/bench_kernels.py) put the BLAS path 2-5x ahead of the direct
loops. Set ``compiled`` to trade that speed for flat memory use, or when a
BLAS-less numpy makes the fallback slow. float64 calls always use the
numpy backend, since the extension is float32-only. Within one backend,
results are bit-reproducible run to run (both are single-threaded apart
from BLAS GEMM, which is deterministic for a fixed thread configuration).
"""

from __future__ import annotations

import os

import numpy as np

from . import kernels_numpy

try:
    from . import _conv3d as _compiled
except ImportError:
    _compiled = None

_VALID = ("auto", "compiled", "numpy")


def _requested() -> str:
    mode = os.environ.get("PATCHDDM_KERNELS", "auto").lower()
    if mode not in _VALID:
        raise ValueError(
            f"PATCHDDM_KERNELS must be one of {_VALID}, got {mode!r}"
        )
    return mode


def compiled_available() -> bool:
    return _compiled is not None


def active_backend() -> str:
    """Name of the backend float32 conv3d calls will use."""
    mode = _requested()
    if mode == "compiled":
        if _compiled is None:
            raise RuntimeError(
                "PATCHDDM_KERNELS=compiled but the extension is not built; "
                "reinstall with a C compiler or use PATCHDDM_KERNELS=numpy"
            )
        return "compiled"
    return "numpy"


def _module_for(dtype) -> object:
    if dtype == np.float32 and active_backend() == "compiled":
        return _compiled
    return kernels_numpy


def conv3d_forward(x, w, stride, pad):
    return _module_for(x.dtype).conv3d_forward(x, w, stride, pad)


def conv3d_grad_input(gy, w, x_shape, stride, pad):
    return _module_for(gy.dtype).conv3d_grad_input(gy, w, x_shape, stride, pad)


def conv3d_grad_kernel(gy, x, w_shape, stride, pad):
    return _module_for(gy.dtype).conv3d_grad_kernel(gy, x, w_shape, stride, pad)
