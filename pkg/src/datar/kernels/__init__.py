"""Hot inner loops with a compiled backend and a pure-numpy fallback.

The compiled module is preferred. Set ``DATAR_PURE_PYTHON=1`` to force the
numpy fallback, e.g. when comparing the two.
"""
import os

from . import _pykernels

try:
    if os.environ.get("DATAR_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python kernels requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

# Past this many multiply-adds per output pixel, numpy's BLAS-backed einsum
# beats the compiled direct loops (dense 2x2 merge convs, for instance).
DENSE_REDUCTION = 64


def _dense(w) -> bool:
    return w.shape[1] * w.shape[2] * w.shape[3] > DENSE_REDUCTION


def conv2d_forward(x, w, stride, padding, groups):
    impl = _pykernels if _dense(w) else _impl
    return impl.conv2d_forward(x, w, stride, padding, groups)


def conv2d_backward(x, w, gout, stride, padding, groups):
    impl = _pykernels if _dense(w) else _impl
    return impl.conv2d_backward(x, w, gout, stride, padding, groups)


bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward


def available_backends():
    """Map backend name to module for every backend importable in this environment."""
    backends = {"python": _pykernels}
    try:
        from . import _ckernels

        backends["cython"] = _ckernels
    except ImportError:
        pass
    return backends
