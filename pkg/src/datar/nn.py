"""Parameter containers and small layers built on the autodiff core."""
from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from .autodiff import Tensor, add, gelu, layer_norm, matmul, parameter, scale, softmax_rows, swap_last
from .errors import ShapeMismatch


class Module:
    """Walks attributes in definition order to find parameters and submodules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ShapeMismatch(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()


def uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return parameter(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform(rng, (c_in, c_out), 1.0 / math.sqrt(c_in))
        self.bias = parameter(np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, dim: int, ratio: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, dim * ratio, rng)
        self.fc2 = Linear(dim * ratio, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """N x (heads*d) -> heads x N x d."""
    n, c = x.shape
    return x.reshape(n, heads, c // heads).transpose(1, 0, 2)


def merge_heads(x: Tensor) -> Tensor:
    """heads x N x d -> N x (heads*d)."""
    m, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, m * d)


def attend(q: Tensor, k: Tensor, v: Tensor, bias: Optional[Tensor] = None,
           keep_probs: Optional[list] = None) -> Tensor:
    """Scaled dot-product attention over stacked heads (heads x N x d).

    ``bias`` is added to every head's logits; it broadcasts against N x N_k.
    """
    d = q.shape[-1]
    logits = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(d))
    if bias is not None:
        logits = add(logits, bias)
    probs = softmax_rows(logits)
    if keep_probs is not None:
        keep_probs.append(probs.data)
    return matmul(probs, v)


class MultiHeadSelfAttention(Module):
    """Bias-free q/k/v/o projections, C x C each, weights uniform in +-1/sqrt(C)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeMismatch(f"channels {dim} not divisible by heads {heads}")
        self.heads = heads
        bound = 1.0 / math.sqrt(dim)
        self.w_q = uniform(rng, (dim, dim), bound)
        self.w_k = uniform(rng, (dim, dim), bound)
        self.w_v = uniform(rng, (dim, dim), bound)
        self.w_o = uniform(rng, (dim, dim), bound)
        self.last_probs: list = []

    def __call__(self, a: Tensor, keep_probs: bool = False) -> Tensor:
        """``a`` is the N x C token matrix."""
        q = split_heads(matmul(a, self.w_q), self.heads)
        k = split_heads(matmul(a, self.w_k), self.heads)
        v = split_heads(matmul(a, self.w_v), self.heads)
        self.last_probs = [] if keep_probs else None
        z = attend(q, k, v, keep_probs=self.last_probs)
        return matmul(merge_heads(z), self.w_o)
