"""Deformable attention over token maps.

Keys and values are gathered by bilinear sampling at a uniform reference grid
shifted by learned, tanh-bounded offsets. Logits get a relative-position bias
interpolated from a continuous table. Coordinates are (y, x) pairs normalized
to [-1, 1], with -1 at the first row/column and +1 at the last.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .autodiff import (
    Tensor,
    _node,
    add,
    as_tensor,
    clamp,
    concat,
    conv2d,
    gelu,
    matmul,
    mul,
    parameter,
    record_macs,
    reshape,
    scale,
    tanh,
    transpose,
)
from .errors import BadFactor, NonFiniteCoord, ShapeMismatch
from .nn import Module, attend, merge_heads, split_heads, uniform

OFFSET_KERNEL = 5


@dataclass(frozen=True)
class ReferenceGrid:
    h_G: int
    T_G: int
    r: int
    points: np.ndarray  # h_G x T_G x 2, (y, x)


def _norm_coords(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    i = np.arange(n, dtype=np.float64)
    return 2.0 * i / (n - 1) - 1.0


def make_grid(h: int, T: int, r: int) -> ReferenceGrid:
    if r < 1 or h % r or T % r:
        raise BadFactor(f"factor r={r} must divide both extents ({h}, {T})")
    h_G, T_G = h // r, T // r
    ys, xs = np.meshgrid(_norm_coords(h_G), _norm_coords(T_G), indexing="ij")
    return ReferenceGrid(h_G, T_G, r, np.stack([ys, xs], axis=-1))


def denormalize(p: np.ndarray, extent: int) -> np.ndarray:
    return (p + 1.0) / 2.0 * (extent - 1)


def bilinear_sample(z: Tensor, pts, normalized: bool = True) -> Tensor:
    """Sample a C x H x W map at N points; returns N x C.

    Weights are max(0, 1 - |u - pixel|) per axis in pixel units, so only the
    four surrounding pixels contribute. Points outside the map are clamped to
    its border. Differentiable w.r.t. both ``z`` and ``pts``.
    """
    z = as_tensor(z)
    pts = as_tensor(pts)
    if z.ndim != 3:
        raise ShapeMismatch(f"sample source must be C x H x W, got {z.shape}")
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeMismatch(f"points must be N x 2, got {pts.shape}")
    if not np.all(np.isfinite(pts.data)):
        raise NonFiniteCoord("sampling coordinates contain NaN or Inf")
    C, H, W = z.shape
    py, px = pts.data[:, 0], pts.data[:, 1]
    if normalized:
        lo_y, hi_y, lo_x, hi_x = -1.0, 1.0, -1.0, 1.0
    else:
        lo_y, hi_y, lo_x, hi_x = 0.0, H - 1.0, 0.0, W - 1.0
    in_y = (py >= lo_y) & (py <= hi_y)
    in_x = (px >= lo_x) & (px <= hi_x)
    py = np.clip(py, lo_y, hi_y)
    px = np.clip(px, lo_x, hi_x)
    if normalized:
        uy, ux = denormalize(py, H), denormalize(px, W)
        dy, dx = (H - 1) / 2.0, (W - 1) / 2.0
    else:
        uy, ux = py, px
        dy = dx = 1.0
    uy = np.ascontiguousarray(uy)
    ux = np.ascontiguousarray(ux)
    zd = np.ascontiguousarray(z.data)
    out = kernels.bilinear_forward(zd, uy, ux)
    record_macs(4 * C * len(uy))

    def bw(g):
        gz, guy, gux = kernels.bilinear_backward(zd, uy, ux, np.ascontiguousarray(g))
        gp = np.stack([guy * dy * in_y, gux * dx * in_x], axis=1)
        return gz, gp

    return _node(out, (z, pts), bw)


def query_positions(h: int, T: int) -> np.ndarray:
    """Normalized (y, x) of every full-resolution token, row-major, shape hT x 2."""
    return make_grid(h, T, 1).points.reshape(-1, 2)


def relative_bias(table: Tensor, q_pos: np.ndarray, k_pos) -> Tensor:
    """Interpolate the bias table at every query-key displacement; returns N_q x N_k.

    The displacement (q - k) / 2 lies in [-1, 1] per axis and is read from the
    table with the same bilinear kernel, so zero displacement hits the center.
    """
    table = as_tensor(table)
    k_pos = as_tensor(k_pos)
    if table.ndim != 2:
        raise ShapeMismatch(f"bias table must be 2-D, got {table.shape}")
    nq, nk = len(q_pos), k_pos.shape[0]
    diff = add(Tensor(q_pos[:, None, :] * 0.5), scale(reshape(k_pos, (1, nk, 2)), -0.5))
    vals = bilinear_sample(reshape(table, (1,) + table.shape), reshape(diff, (nq * nk, 2)))
    return reshape(vals, (nq, nk))


@dataclass(frozen=True)
class DeformAttnConfig:
    channels: int
    heads: int
    groups: int = 0  # 0 -> heads // 2, at least 1
    r: int = 1
    offset_scale: float = 2.0
    offset_stride: int = 4

    def __post_init__(self):
        if self.groups == 0:
            object.__setattr__(self, "groups", max(1, self.heads // 2))
        if self.heads < 1 or self.channels % self.heads:
            raise ShapeMismatch(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.groups < 1 or self.heads % self.groups:
            raise ShapeMismatch(f"heads {self.heads} not divisible by groups {self.groups}")
        if self.offset_stride < 1:
            raise ShapeMismatch("offset_stride must be >= 1")
        if self.r < 1:
            raise BadFactor("r must be >= 1")
        if self.offset_scale < 0:
            raise ShapeMismatch("offset_scale must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


@dataclass
class OffsetField:
    offsets: np.ndarray  # G x h_G x T_G x 2
    bound: np.ndarray  # per-axis max amplitude in normalized units, (y, x)


def offset_bound(cfg: DeformAttnConfig, h: int, T: int) -> np.ndarray:
    """Per-axis amplitude: ``offset_scale`` grid cells, expressed as scale * r / extent."""
    return np.array([cfg.offset_scale * cfg.r / h, cfg.offset_scale * cfg.r / T])


def offset_map_size(n: int, stride: int) -> int:
    pad = OFFSET_KERNEL // 2
    return (n + 2 * pad - OFFSET_KERNEL) // stride + 1


class AudioOffsetGenerator(Module):
    """Strided 5x5 depthwise conv -> GELU -> bias-free 1x1 conv -> resize -> bounded tanh."""

    def __init__(self, cfg: DeformAttnConfig, rng: np.random.Generator):
        C, G = cfg.channels, cfg.groups
        self.cfg = cfg
        self.dw_weight = uniform(rng, (C, 1, OFFSET_KERNEL, OFFSET_KERNEL), 1.0 / OFFSET_KERNEL)
        self.dw_bias = parameter(np.zeros(C))
        self.pw_weight = uniform(rng, (2 * G, C, 1, 1), 1.0 / math.sqrt(C))

    def __call__(self, q_map: Tensor) -> Tensor:
        """Offsets for every reference point, G x h_G x T_G x 2."""
        cfg = self.cfg
        C, h, T = q_map.shape
        if C != cfg.channels:
            raise ShapeMismatch(f"expected {cfg.channels} query channels, got {C}")
        grid = make_grid(h, T, cfg.r)
        hid = conv2d(q_map, self.dw_weight, self.dw_bias, stride=cfg.offset_stride,
                     padding=OFFSET_KERNEL // 2, groups=C)
        raw = conv2d(gelu(hid), self.pw_weight)
        # resize onto the reference grid with the same bilinear kernel
        dst = make_grid(grid.h_G, grid.T_G, 1).points.reshape(-1, 2)
        raw = bilinear_sample(raw, dst)  # (h_G*T_G) x 2G
        bound = np.tile(offset_bound(cfg, h, T), cfg.groups)
        off = mul(tanh(raw), Tensor(bound))
        off = reshape(off, (grid.h_G, grid.T_G, cfg.groups, 2))
        return transpose(off, (2, 0, 1, 3))


class DeformableAttention(Module):
    """Token mixer whose keys and values come from a deformed, downsampled grid.

    Heads are split contiguously into offset groups; heads in a group share
    one offset field and one sampled key/value map.
    """

    def __init__(self, cfg: DeformAttnConfig, h: int, T: int, rng: np.random.Generator):
        self.cfg = cfg
        self.h, self.T = h, T
        self.grid = make_grid(h, T, cfg.r)
        C = cfg.channels
        bound = 1.0 / math.sqrt(C)
        self.w_q = uniform(rng, (C, C), bound)
        self.w_k = uniform(rng, (C, C), bound)
        self.w_v = uniform(rng, (C, C), bound)
        self.w_o = uniform(rng, (C, C), bound)
        self.offset_net = AudioOffsetGenerator(cfg, rng)
        self.bias_table = parameter(np.zeros((2 * h - 1, 2 * T - 1)))
        self.last_offsets: Optional[OffsetField] = None
        self.last_probs: Optional[list] = None
        self.force_zero_offsets = False

    @property
    def num_keys(self) -> int:
        return self.grid.h_G * self.grid.T_G

    def __call__(self, a: Tensor, keep_probs: bool = False) -> Tensor:
        """``a`` is the hT x C token matrix in row-major map order; returns hT x C."""
        cfg = self.cfg
        h, T, C, G = self.h, self.T, cfg.channels, cfg.groups
        N = h * T
        if a.shape != (N, C):
            raise ShapeMismatch(f"expected tokens of shape {(N, C)}, got {a.shape}")
        x_map = reshape(transpose(a, (1, 0)), (C, h, T))
        q = matmul(a, self.w_q)
        q_map = reshape(transpose(q, (1, 0)), (C, h, T))

        if self.force_zero_offsets:
            off = Tensor(np.zeros((G, self.grid.h_G, self.grid.T_G, 2)))
        else:
            off = self.offset_net(q_map)
        self.last_offsets = OffsetField(off.data.copy(), offset_bound(cfg, h, T))
        pos = clamp(add(Tensor(self.grid.points[None]), off), -1.0, 1.0)

        q_pos = query_positions(h, T)
        cg = C // G
        mg = cfg.heads // G
        self.last_probs = [] if keep_probs else None
        outs = []
        for g in range(G):
            cols = slice(g * cg, (g + 1) * cg)
            pts = reshape(pos[g], (self.num_keys, 2))
            xs = bilinear_sample(x_map, pts)  # N_k x C
            k = matmul(xs, self.w_k[:, cols])
            v = matmul(xs, self.w_v[:, cols])
            bias = relative_bias(self.bias_table, q_pos, pts)
            z = attend(split_heads(q[:, cols], mg), split_heads(k, mg), split_heads(v, mg),
                       bias=bias, keep_probs=self.last_probs)
            outs.append(merge_heads(z))
        z = outs[0] if G == 1 else concat(outs, axis=1)
        return matmul(z, self.w_o)


def deform_attention(x: Tensor, module: DeformableAttention) -> Tensor:
    """Map-in, map-out form: C x h x T -> C x h x T."""
    C, h, T = x.shape
    a = transpose(reshape(x, (C, h * T)), (1, 0))
    z = module(a)
    return reshape(transpose(z, (1, 0)), (C, h, T))


def _interp_matrix(points: np.ndarray, extent: int) -> np.ndarray:
    """Rows of max(0, 1 - |u - i|) weights for normalized 1-D points."""
    u = denormalize(np.clip(points, -1.0, 1.0), extent)
    return np.maximum(0.0, 1.0 - np.abs(u[:, None] - np.arange(extent)[None, :]))


def fixed_grid_attention(module: DeformableAttention, a: np.ndarray) -> np.ndarray:
    """Attention over the undeformed reference grid, computed in plain numpy.

    Independent of the tensor path: separable interpolation matrices instead of
    the sampling kernel, explicit per-head loops, dense table weights for the bias.
    """
    cfg = module.cfg
    h, T, C = module.h, module.T, cfg.channels
    grid = module.grid
    x_map = a.T.reshape(C, h, T)
    wy = _interp_matrix(grid.points[:, 0, 0], h)  # h_G x h
    wx = _interp_matrix(grid.points[0, :, 1], T)  # T_G x T
    sampled = np.einsum("gy,cyx,tx->gtc", wy, x_map, wx).reshape(-1, C)

    q = a @ module.w_q.data
    k = sampled @ module.w_k.data
    v = sampled @ module.w_v.data

    q_pos = query_positions(h, T)
    k_pos = grid.points.reshape(-1, 2)
    disp = 0.5 * (q_pos[:, None, :] - k_pos[None, :, :])
    table = module.bias_table.data
    by = _interp_matrix(disp[..., 0].ravel(), table.shape[0])
    bx = _interp_matrix(disp[..., 1].ravel(), table.shape[1])
    bias = np.einsum("pa,ab,pb->p", by, table, bx).reshape(len(q_pos), len(k_pos))

    d = cfg.head_dim
    heads = []
    for m in range(cfg.heads):
        cols = slice(m * d, (m + 1) * d)
        logits = q[:, cols] @ k[:, cols].T / math.sqrt(d) + bias
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        heads.append(p @ v[:, cols])
    return np.concatenate(heads, axis=1) @ module.w_o.data
