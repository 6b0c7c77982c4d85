"""Pyramid transformer backbone: patch embedding, vanilla and deformable blocks, heads."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .adaptor import MODES, InputAdaptor, perturb
from .autodiff import Tensor, add, as_tensor, conv2d, mean, parameter, reshape, transpose
from .deform import DeformableAttention, DeformAttnConfig, make_grid, offset_map_size
from .errors import BadMagic, ConfigMismatch, TruncatedFile
from .nn import MLP, LayerNorm, Linear, Module, MultiHeadSelfAttention, uniform

KINDS = ("vanilla", "deformable")


@dataclass
class StageSpec:
    depth: int = 1
    channels: int = 16
    heads: int = 1
    kind: str = "vanilla"
    merge: bool = False
    r: int = 1
    groups: int = 0
    offset_scale: float = 2.0
    offset_stride: int = 4

    def deform_config(self) -> DeformAttnConfig:
        return DeformAttnConfig(self.channels, self.heads, self.groups, self.r,
                                self.offset_scale, self.offset_stride)


@dataclass
class AdaptorConfig:
    enabled: bool = True
    lam: float = 0.005
    kernel: int = 5
    mode: str = "learned"
    noise_scale: float = 0.005

    @property
    def effective_mode(self) -> str:
        return self.mode if self.enabled else "off"


def default_stages() -> list[StageSpec]:
    return [
        StageSpec(depth=1, channels=16, heads=1, kind="vanilla", merge=False),
        StageSpec(depth=1, channels=32, heads=2, kind="vanilla", merge=True),
        StageSpec(depth=2, channels=64, heads=4, kind="deformable", merge=True, r=2),
        StageSpec(depth=1, channels=128, heads=8, kind="deformable", merge=True, r=1),
    ]


@dataclass
class ModelConfig:
    input_h: int = 64
    input_T: int = 64
    stages: list[StageSpec] = field(default_factory=default_stages)
    patch: int = 4
    patch_stride: int = 4
    num_classes: int = 4
    num_verbs: int = 0
    num_nouns: int = 0
    mlp_ratio: int = 4
    adaptor: AdaptorConfig = field(default_factory=AdaptorConfig)

    @property
    def dual(self) -> bool:
        return self.num_verbs > 0 and self.num_nouns > 0

    def stage_extents(self) -> list[tuple[int, int]]:
        """Token-map extents seen by each stage, after its optional merge."""
        self.validate()
        h = (self.input_h - self.patch) // self.patch_stride + 1
        T = (self.input_T - self.patch) // self.patch_stride + 1
        out = []
        for st in self.stages:
            if st.merge:
                h, T = h // 2, T // 2
            out.append((h, T))
        return out

    def validate(self) -> None:
        if not self.stages:
            raise ConfigMismatch("at least one stage is required")
        if self.patch < 1 or self.patch_stride < 1:
            raise ConfigMismatch("patch and patch_stride must be >= 1")
        for name, n in (("input_h", self.input_h), ("input_T", self.input_T)):
            if n < self.patch or (n - self.patch) % self.patch_stride:
                raise ConfigMismatch(f"{name}={n} incompatible with patch {self.patch} "
                                     f"stride {self.patch_stride}")
        if not self.dual and self.num_classes < 1:
            raise ConfigMismatch("set num_classes, or both num_verbs and num_nouns")
        if self.adaptor.mode not in MODES:
            raise ConfigMismatch(f"adaptor mode must be one of {MODES}")
        h = (self.input_h - self.patch) // self.patch_stride + 1
        T = (self.input_T - self.patch) // self.patch_stride + 1
        prev_c = None
        for i, st in enumerate(self.stages):
            if st.kind not in KINDS:
                raise ConfigMismatch(f"stage {i}: kind must be one of {KINDS}")
            if st.depth < 1 or st.channels < 1 or st.heads < 1 or st.channels % st.heads:
                raise ConfigMismatch(f"stage {i}: need depth >= 1 and channels divisible by heads")
            if st.merge:
                if i == 0:
                    raise ConfigMismatch("stage 0 cannot merge; the patch embedding sets its size")
                if h % 2 or T % 2:
                    raise ConfigMismatch(f"stage {i}: extents {h}x{T} not divisible by 2")
                h, T = h // 2, T // 2
            elif prev_c is not None and prev_c != st.channels:
                raise ConfigMismatch(f"stage {i}: channel change requires merge")
            if st.kind == "deformable":
                try:
                    st.deform_config()
                    make_grid(h, T, st.r)
                except Exception as exc:
                    raise ConfigMismatch(f"stage {i}: {exc}") from exc
            prev_c = st.channels


def to_tokens(x: Tensor) -> Tensor:
    C, h, T = x.shape
    return transpose(reshape(x, (C, h * T)), (1, 0))


def to_map(a: Tensor, h: int, T: int) -> Tensor:
    N, C = a.shape
    return reshape(transpose(a, (1, 0)), (C, h, T))


class PatchEmbed(Module):
    """Strided convolution projecting C_in x H x W to C_out x H' x W', then a token LayerNorm.

    Without the norm the merged maps drift in scale and training at lr 1e-3 collapses
    to the label prior.
    """

    def __init__(self, c_in: int, c_out: int, patch: int, stride: int, rng: np.random.Generator):
        self.stride = stride
        self.weight = uniform(rng, (c_out, c_in, patch, patch), 1.0 / math.sqrt(c_in * patch * patch))
        self.bias = parameter(np.zeros(c_out))
        self.norm = LayerNorm(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.weight, self.bias, stride=self.stride)
        _, h, T = y.shape
        return to_map(self.norm(to_tokens(y)), h, T)


def patch_embed(x, kernel: Tensor, bias: Optional[Tensor], stride: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 2:
        x = reshape(x, (1,) + x.shape)
    return conv2d(x, kernel, bias, stride=stride)


class Block(Module):
    """Pre-norm residual block: token mixer then MLP, each wrapped in LN and a shortcut."""

    def __init__(self, dim: int, mixer: Module, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = mixer
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio, rng)

    def __call__(self, a: Tensor) -> Tensor:
        a = add(a, self.attn(self.norm1(a)))
        return add(a, self.mlp(self.norm2(a)))


def vanilla_block(dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4) -> Block:
    return Block(dim, MultiHeadSelfAttention(dim, heads, rng), mlp_ratio, rng)


def deformable_block(cfg: DeformAttnConfig, h: int, T: int, rng: np.random.Generator,
                     mlp_ratio: int = 4) -> Block:
    return Block(cfg.channels, DeformableAttention(cfg, h, T, rng), mlp_ratio, rng)


class Stage(Module):
    def __init__(self, spec: StageSpec, c_in: int, h: int, T: int, mlp_ratio: int,
                 rng: np.random.Generator):
        self.h, self.T = h, T
        self.merge = PatchEmbed(c_in, spec.channels, 2, 2, rng) if spec.merge else None
        if spec.kind == "vanilla":
            self.blocks = [vanilla_block(spec.channels, spec.heads, rng, mlp_ratio)
                           for _ in range(spec.depth)]
        else:
            dcfg = spec.deform_config()
            self.blocks = [deformable_block(dcfg, h, T, rng, mlp_ratio) for _ in range(spec.depth)]

    def __call__(self, x: Tensor) -> Tensor:
        if self.merge is not None:
            x = self.merge(x)
        a = to_tokens(x)
        for blk in self.blocks:
            a = blk(a)
        return to_map(a, self.h, self.T)


class DATAR(Module):
    """Adaptor -> patch embedding -> stages -> LN -> mean pool -> linear head(s)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ad = cfg.adaptor
        self.adaptor = InputAdaptor(1, ad.kernel, ad.lam) if ad.effective_mode == "learned" else None
        self.patch_embed = PatchEmbed(1, cfg.stages[0].channels, cfg.patch, cfg.patch_stride, rng)
        extents = cfg.stage_extents()
        c_in = cfg.stages[0].channels
        self.stages = []
        for spec, (h, T) in zip(cfg.stages, extents):
            self.stages.append(Stage(spec, c_in, h, T, cfg.mlp_ratio, rng))
            c_in = spec.channels
        self.norm = LayerNorm(c_in)
        if cfg.dual:
            self.head_verb = Linear(c_in, cfg.num_verbs, rng)
            self.head_noun = Linear(c_in, cfg.num_nouns, rng)
        else:
            self.head = Linear(c_in, cfg.num_classes, rng)

    def deformable_modules(self) -> list[DeformableAttention]:
        return [blk.attn for st in self.stages for blk in st.blocks
                if isinstance(blk.attn, DeformableAttention)]

    def embed_input(self, spec, noise_seed: Optional[int] = None) -> Tensor:
        """The 1 x h x T map entering the patch embedding (after adaptor or noise)."""
        x = as_tensor(spec)
        if x.ndim == 2:
            x = reshape(x, (1,) + x.shape)
        if x.shape != (1, self.cfg.input_h, self.cfg.input_T):
            raise ConfigMismatch(f"model expects 1 x {self.cfg.input_h} x {self.cfg.input_T} "
                                 f"input, got {x.shape}")
        mode = self.cfg.adaptor.effective_mode
        if self.adaptor is not None:
            x = self.adaptor(x)
        elif mode in ("gaussian", "laplacian") and noise_seed is not None:
            x = perturb(x, mode, self.cfg.adaptor.noise_scale, noise_seed)
        return x

    def features(self, spec, noise_seed: Optional[int] = None) -> Tensor:
        x = self.patch_embed(self.embed_input(spec, noise_seed))
        for st in self.stages:
            x = st(x)
        return mean(self.norm(to_tokens(x)), axis=0, keepdims=True)  # 1 x C

    def __call__(self, spec, noise_seed: Optional[int] = None) -> Union[Tensor, tuple[Tensor, Tensor]]:
        f = self.features(spec, noise_seed)
        if self.cfg.dual:
            return (reshape(self.head_verb(f), (self.cfg.num_verbs,)),
                    reshape(self.head_noun(f), (self.cfg.num_nouns,)))
        return reshape(self.head(f), (self.cfg.num_classes,))


# --------------------------------------------------------------------------
# analytic cost model


def conv_macs(c_out: int, c_in: int, groups: int, kh: int, kw: int, ho: int, wo: int) -> int:
    return c_out * (c_in // groups) * kh * kw * ho * wo


def matmul_macs(m: int, k: int, n: int) -> int:
    return m * k * n


def vanilla_block_macs(C: int, N: int, mlp_ratio: int) -> int:
    proj = 4 * matmul_macs(N, C, C)
    attn = 2 * N * N * C  # q k^T and probs v, summed over heads
    mlp = 2 * matmul_macs(N, C, mlp_ratio * C)
    return proj + attn + mlp


def deformable_block_macs(dcfg: DeformAttnConfig, h: int, T: int, mlp_ratio: int) -> int:
    C, G = dcfg.channels, dcfg.groups
    N = h * T
    grid = make_grid(h, T, dcfg.r)
    nk = grid.h_G * grid.T_G
    ho, wo = offset_map_size(h, dcfg.offset_stride), offset_map_size(T, dcfg.offset_stride)
    aog = (conv_macs(C, C, C, 5, 5, ho, wo) + conv_macs(2 * G, C, 1, 1, 1, ho, wo)
           + 4 * 2 * G * nk)
    per_group = (4 * C * nk  # key/value sampling
                 + 2 * matmul_macs(nk, C, C // G)  # k and v projections
                 + 4 * N * nk  # bias-table interpolation
                 + 2 * N * nk * (C // G))  # logits and weighted sum
    proj = 2 * matmul_macs(N, C, C)  # q and output
    mlp = 2 * matmul_macs(N, C, mlp_ratio * C)
    return aog + G * per_group + proj + mlp


def count_macs(cfg: ModelConfig) -> int:
    """Multiply-accumulates of one forward pass, layer by layer in closed form.

    Layer norms, softmax, pooling and elementwise ops are not counted.
    """
    cfg.validate()
    total = 0
    if cfg.adaptor.effective_mode == "learned":
        k = cfg.adaptor.kernel
        total += conv_macs(1, 1, 1, k, k, cfg.input_h, cfg.input_T)
    extents = cfg.stage_extents()
    h0, w0 = extents[0]  # stage 0 never merges
    total += conv_macs(cfg.stages[0].channels, 1, 1, cfg.patch, cfg.patch, h0, w0)
    c_in = cfg.stages[0].channels
    for spec, (h, T) in zip(cfg.stages, extents):
        if spec.merge:
            total += conv_macs(spec.channels, c_in, 1, 2, 2, h, T)
        for _ in range(spec.depth):
            if spec.kind == "vanilla":
                total += vanilla_block_macs(spec.channels, h * T, cfg.mlp_ratio)
            else:
                total += deformable_block_macs(spec.deform_config(), h, T, cfg.mlp_ratio)
        c_in = spec.channels
    heads = [cfg.num_verbs, cfg.num_nouns] if cfg.dual else [cfg.num_classes]
    total += sum(matmul_macs(1, c_in, k) for k in heads)
    return total


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"DCKP"
CKPT_VERSION = 1


def save_checkpoint(path, config_text: str, state: dict[str, np.ndarray]) -> None:
    """Write parameters as float32 records after a length-prefixed UTF-8 config."""
    cfg = config_text.encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(cfg)), cfg]
    for name, arr in state.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise BadMagic(f"{path}: not a checkpoint file")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedFile(f"{path}: unexpected end of file")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise BadMagic(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    text = take(n).decode("utf-8")
    state: dict[str, np.ndarray] = {}
    while pos < len(raw):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        state[name] = arr.astype(np.float64)
    return text, state
