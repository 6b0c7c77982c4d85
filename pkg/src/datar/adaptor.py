"""Learnable residual input adaptor and the fixed-noise baselines it is compared against."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, conv2d, parameter, scale
from .errors import BadConfig, BadScale, ShapeMismatch
from .nn import Module

DEFAULT_LAMBDA = 0.005
MODES = ("learned", "gaussian", "laplacian", "off")


def adapt(x: Tensor, kernel: Tensor, bias: Tensor, lam: float) -> Tensor:
    """``x + lam * (bias + conv(x, kernel))`` with same padding.

    ``x`` is C x h x T, ``kernel`` is C x C x kh x kw with odd spatial extents.
    """
    if x.ndim != 3:
        raise ShapeMismatch(f"adaptor input must be C x h x T, got {x.shape}")
    C = x.shape[0]
    if kernel.ndim != 4 or kernel.shape[:2] != (C, C):
        raise ShapeMismatch(f"kernel must be {C} x {C} x kh x kw, got {kernel.shape}")
    kh, kw = kernel.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch("adaptor kernel extents must be odd")
    if kh != kw:
        raise ShapeMismatch("adaptor kernel must be square")
    if lam < 0:
        raise BadConfig(f"lambda must be >= 0, got {lam}")
    if lam == 0.0:
        return x
    return add(x, scale(conv2d(x, kernel, bias, padding=kh // 2), lam))


def perturb(x, dist: str, scale: float, seed: int):
    """Add i.i.d. zero-mean noise whose standard deviation is ``scale``.

    Laplace noise uses diversity ``scale / sqrt(2)`` so both distributions share
    the same variance. Works on arrays and tensors; the noise itself is constant.
    """
    if not scale >= 0:
        raise BadScale(f"noise scale must be >= 0, got {scale}")
    if dist not in ("gaussian", "laplacian"):
        raise BadConfig(f"unknown noise distribution {dist!r}")
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if scale == 0:
        return x
    rng = np.random.default_rng(seed)
    if dist == "gaussian":
        noise = rng.normal(0.0, scale, size=data.shape)
    else:
        noise = rng.laplace(0.0, scale / np.sqrt(2.0), size=data.shape)
    if isinstance(x, Tensor):
        return add(x, Tensor(noise))
    return data + noise


class InputAdaptor(Module):
    """Residual adaptor with zero-initialised kernel and bias, an identity at step 0."""

    def __init__(self, channels: int = 1, kernel: int = 5, lam: float = DEFAULT_LAMBDA):
        if kernel % 2 == 0 or kernel < 1:
            raise BadConfig(f"adaptor kernel must be odd, got {kernel}")
        self.lam = float(lam)
        self.weight = parameter(np.zeros((channels, channels, kernel, kernel)))
        self.bias = parameter(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return adapt(x, self.weight, self.bias, self.lam)
