"""Finite-difference gradient audits of each learnable component on toy shapes."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .adaptor import adapt
from .autodiff import Tensor, grad_check, mul, parameter
from .backbone import (
    DATAR,
    AdaptorConfig,
    ModelConfig,
    StageSpec,
    deformable_block,
    vanilla_block,
)
from .deform import AudioOffsetGenerator, DeformAttnConfig
from .nn import Module
from .train import cross_entropy

TOLERANCE = 1e-4


def _jitter(module: Module, rng: np.random.Generator, amp: float = 0.2) -> None:
    # zero-initialised tables, biases and adaptor kernels would hide gradient bugs
    for p in module.parameters():
        p.data = p.data + amp * rng.standard_normal(p.shape)


def check_tensors(f: Callable[[], Tensor], tensors: dict[str, Tensor], eps: float,
                  max_coords: Optional[int], rng: np.random.Generator) -> float:
    """Max relative error of ``f`` w.r.t. each tensor, sampling at most ``max_coords`` entries."""
    worst = 0.0
    for t in tensors.values():
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = rng.choice(t.size, size=max_coords, replace=False)
        worst = max(worst, grad_check(lambda _x: f(), t, eps, coords))
        for other in tensors.values():
            other.grad = None
    return worst


def _projector(shape, rng) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def audit_adaptor(size: int, rng, eps: float, max_coords=None) -> float:
    x = parameter(rng.standard_normal((1, size, size)))
    w = parameter(rng.standard_normal((1, 1, 5, 5)))
    b = parameter(rng.standard_normal(1))
    proj = _projector(x.shape, rng)
    return check_tensors(lambda: mul(adapt(x, w, b, 0.005), proj).sum(),
                         {"x": x, "w": w, "b": b}, eps, max_coords, rng)


def toy_deform_config(channels: int = 8) -> DeformAttnConfig:
    return DeformAttnConfig(channels=channels, heads=2, groups=1, r=2, offset_scale=2.0, offset_stride=4)


def audit_offset_generator(size: int, rng, eps: float, max_coords=None, channels: int = 8) -> float:
    aog = AudioOffsetGenerator(toy_deform_config(channels), rng)
    _jitter(aog, rng)
    q = parameter(rng.standard_normal((channels, size, size)))
    proj = None

    def f():
        nonlocal proj
        out = aog(q)
        if proj is None:
            proj = _projector(out.shape, rng)
        return mul(out, proj).sum()

    f()
    return check_tensors(f, {"q": q, **dict(aog.named_parameters())}, eps, max_coords, rng)


def audit_block(kind: str, size: int, rng, eps: float, max_coords=None, channels: int = 8) -> float:
    if kind == "vanilla":
        blk = vanilla_block(channels, 2, rng)
    else:
        blk = deformable_block(toy_deform_config(channels), size, size, rng)
    _jitter(blk, rng)
    a = parameter(rng.standard_normal((size * size, channels)))
    proj = _projector(a.shape, rng)
    return check_tensors(lambda: mul(blk(a), proj).sum(),
                         {"a": a, **dict(blk.named_parameters())}, eps, max_coords, rng)


def toy_model_config(size: int = 8, channels: int = 8) -> ModelConfig:
    return ModelConfig(
        input_h=size, input_T=size, patch=1, patch_stride=1, num_classes=4,
        stages=[
            StageSpec(depth=1, channels=channels, heads=2, kind="vanilla"),
            StageSpec(depth=1, channels=channels, heads=2, kind="deformable", groups=1, r=2),
        ],
        adaptor=AdaptorConfig(enabled=True, lam=0.005, kernel=5, mode="learned"),
    )


def audit_model(size: int, rng, eps: float, max_coords=None, channels: int = 8) -> float:
    model = DATAR(toy_model_config(size, channels), seed=int(rng.integers(1 << 31)))
    _jitter(model, rng)
    x = parameter(rng.standard_normal((size, size)))
    label = int(rng.integers(4))
    return check_tensors(lambda: cross_entropy(model(x), label),
                         {"x": x, **dict(model.named_parameters())}, eps, max_coords, rng)


COMPONENTS = {
    "adaptor": audit_adaptor,
    "offset_generator": audit_offset_generator,
    "deformable_block": lambda s, r, e, m=None: audit_block("deformable", s, r, e, m),
    "vanilla_block": lambda s, r, e, m=None: audit_block("vanilla", s, r, e, m),
    "model": audit_model,
}


def run_audit(size: int = 8, seed: int = 0, eps: float = 1e-5,
              max_coords: Optional[int] = None) -> dict[str, float]:
    """Max relative gradient error per component, each from its own seeded stream."""
    out = {}
    for i, (name, fn) in enumerate(COMPONENTS.items()):
        out[name] = fn(size, np.random.default_rng([seed, i]), eps, max_coords)
    return out
