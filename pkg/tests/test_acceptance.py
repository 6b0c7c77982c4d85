"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line; conftest prints them after the run.
"""
import csv
import functools
import io
import math
import re
import time
from pathlib import Path

import numpy as np
import pytest

from datar import kernels
from datar.adaptor import InputAdaptor, adapt
from datar.autodiff import Tensor, mac_tally, softmax_rows
from datar.backbone import DATAR, AdaptorConfig, ModelConfig, StageSpec, count_macs
from datar.cli import main
from datar.config import load_config
from datar.deform import (
    AudioOffsetGenerator,
    DeformableAttention,
    DeformAttnConfig,
    bilinear_sample,
    fixed_grid_attention,
    offset_bound,
)
from datar.nn import MultiHeadSelfAttention
from datar.train import ABLATION_ROWS, cross_entropy, evaluate, load_data, train

from helpers import tiny_args
from oracles import conv2d_loops, denorm, mhsa_numpy, sample_double_sum

ROOT = Path(__file__).resolve().parent.parent
RESULTS: list[str] = []


def criterion(num, title):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            t0 = time.time()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                RESULTS.append(f"FAIL  {num:>2}. {title}: {type(exc).__name__}: {str(exc)[:120]}")
                raise
            extra = f" [{detail}]" if detail else ""
            RESULTS.append(f"PASS  {num:>2}. {title}{extra} ({time.time() - t0:.1f}s)")
        return wrapper
    return deco


@criterion(1, "gradient audit < 1e-4 for all components in < 60 s")
def test_gradient_audit(capsys):
    t0 = time.time()
    rc = main(["gradcheck", "--size", "8", "--eps", "1e-5"])
    elapsed = time.time() - t0
    out = capsys.readouterr().out
    errs = {m.group(1): float(m.group(2)) for m in re.finditer(r"^(\w+)\s+max_rel_err=(\S+)", out, re.M)}
    assert set(errs) == {"adaptor", "offset_generator", "deformable_block", "vanilla_block", "model"}
    assert rc == 0 and max(errs.values()) < 1e-4, out
    assert elapsed < 60.0
    return f"worst {max(errs.values()):.1e}, {elapsed:.1f}s"


@criterion(2, "bilinear sampling vs exhaustive double sum on 10,000 pairs; integer points exact")
def test_bilinear_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(10_000):
        C, H, W = rng.integers(1, 4), rng.integers(1, 9), rng.integers(1, 9)
        z = rng.standard_normal((C, H, W))
        p = rng.uniform(-1.2, 1.2, 2)
        got = bilinear_sample(Tensor(z), p[None]).data[0]
        ref = sample_double_sum(z, denorm(p[0], H), denorm(p[1], W))
        worst = max(worst, float(np.max(np.abs(got - ref))))
    assert worst < 1e-12

    for _ in range(1000):
        C, H, W = rng.integers(1, 4), rng.integers(1, 9), rng.integers(1, 9)
        z = rng.standard_normal((C, H, W))
        iy, ix = rng.integers(0, H), rng.integers(0, W)
        got = bilinear_sample(Tensor(z), [[float(iy), float(ix)]], normalized=False).data[0]
        assert np.array_equal(got, z[:, iy, ix])
    # odd extents 2^k + 1 put every pixel on a dyadic normalized coordinate
    z = rng.standard_normal((2, 9, 5))
    pts = [[2 * i / 8 - 1, 2 * j / 4 - 1] for i in range(9) for j in range(5)]
    got = bilinear_sample(Tensor(z), pts).data
    assert np.array_equal(got, z.reshape(2, -1).T)
    return f"max err {worst:.1e}, backend {kernels.BACKEND}"


def _zero_aog(mod):
    for p in mod.offset_net.parameters():
        p.data[...] = 0.0


@criterion(3, "zero offsets equal fixed-grid attention, and MHSA when r=1 and zero bias (100 seeds)")
def test_zero_offset_equivalence():
    worst_grid = worst_mhsa = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        mod = DeformableAttention(DeformAttnConfig(8, 4, 2, r=2), 8, 8, rng)
        _zero_aog(mod)
        mod.bias_table.data = rng.standard_normal(mod.bias_table.shape)
        a = rng.standard_normal((64, 8))
        worst_grid = max(worst_grid, float(np.max(np.abs(mod(Tensor(a)).data - fixed_grid_attention(mod, a)))))

        mod1 = DeformableAttention(DeformAttnConfig(8, 2, 1, r=1), 4, 8, rng)
        _zero_aog(mod1)
        a1 = rng.standard_normal((32, 8))
        mhsa = MultiHeadSelfAttention(8, 2, rng)
        for n in ("w_q", "w_k", "w_v", "w_o"):
            getattr(mhsa, n).data = getattr(mod1, n).data.copy()
        ref = mhsa_numpy(a1, mod1.w_q.data, mod1.w_k.data, mod1.w_v.data, mod1.w_o.data, 2)
        got = mod1(Tensor(a1)).data
        worst_mhsa = max(worst_mhsa, float(np.max(np.abs(got - ref))),
                         float(np.max(np.abs(got - mhsa(Tensor(a1)).data))))
    assert worst_grid < 1e-10 and worst_mhsa < 1e-10
    return f"grid {worst_grid:.1e}, mhsa {worst_mhsa:.1e}"


@criterion(4, "offset components never exceed the bound (1,000 random cases)")
def test_offset_bound():
    rng = np.random.default_rng(4)
    for i in range(1000):
        groups = int(rng.choice([1, 2]))
        r = int(rng.choice([1, 2]))
        cfg = DeformAttnConfig(8, 4, groups, r=r, offset_scale=float(rng.uniform(0.5, 4.0)))
        aog = AudioOffsetGenerator(cfg, rng)
        amp = 10.0 ** rng.uniform(-1, 2)
        for p in aog.parameters():
            p.data = rng.standard_normal(p.shape) * amp
        h, T = 2 * int(rng.integers(2, 5)), 2 * int(rng.integers(2, 9))
        off = aog(Tensor(rng.standard_normal((8, h, T)) * amp)).data
        bound = offset_bound(cfg, h, T)
        assert np.all(np.abs(off) <= bound), i


@criterion(5, "adaptor identity at lambda=0 and zero init; residual within 1e-12")
def test_adaptor_identity():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        x = rng.standard_normal((1, 8, 8))
        w, b = rng.standard_normal((1, 1, 5, 5)), rng.standard_normal(1)
        assert adapt(Tensor(x), Tensor(w), Tensor(b), 0.0).data.tobytes() == x.tobytes()
        assert InputAdaptor()(Tensor(x)).data.tobytes() == x.tobytes()
        out = adapt(Tensor(x), Tensor(w), Tensor(b), 0.005).data
        worst = max(worst, float(np.max(np.abs((out - x) - 0.005 * conv2d_loops(x, w, b, padding=2)))))
    assert worst < 1e-12
    return f"residual err {worst:.1e}"


@criterion(6, "attention rows sum to 1 within 1e-12; uniform cross-entropy is ln K")
def test_softmax_invariants():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(50):
        p = softmax_rows(Tensor(rng.standard_normal((8, 16)) * 20)).data
        worst = max(worst, float(np.max(np.abs(p.sum(axis=1) - 1.0))))
    mod = DeformableAttention(DeformAttnConfig(16, 4, 2, r=2), 8, 8, rng)
    mod(Tensor(rng.standard_normal((64, 16)) * 3), keep_probs=True)
    mhsa = MultiHeadSelfAttention(16, 4, rng)
    mhsa(Tensor(rng.standard_normal((64, 16)) * 3), keep_probs=True)
    for probs in mod.last_probs + mhsa.last_probs:
        worst = max(worst, float(np.max(np.abs(probs.sum(axis=-1) - 1.0))))
    assert worst < 1e-12
    for K in (2, 4, 97, 293):
        assert abs(cross_entropy(Tensor(np.full(K, 0.7)), K - 1).item() - math.log(K)) < 1e-12
    return f"max row error {worst:.1e}"


@pytest.mark.slow
@criterion(7, "overfit: train top-1 >= 0.95 within 60 epochs, deterministic, < 10 min")
def test_overfit():
    cfg = load_config(ROOT / "configs" / "desk.cfg")
    assert cfg["optim.lr"] == 1e-3 and cfg["train.epochs"] <= 60
    t0 = time.time()
    data, _ = load_data(cfg)
    assert len(data) == 64 and sorted({ex.label for ex in data}) == [0, 1, 2, 3]
    res = train(cfg, data)
    elapsed = time.time() - t0
    final = evaluate(res.model, data)
    best_epoch = next((r["epoch"] for r in res.metrics.rows if r["top1"] >= 0.95), None)
    assert res.metrics.last("train")["top1"] >= 0.95
    assert final["top1"] >= 0.95
    assert elapsed < 600.0
    # same seed replays the same trajectory
    again = train(cfg, data, epochs=2).metrics.to_csv().splitlines()
    assert again == res.metrics.to_csv().splitlines()[:3]
    return (f"top-1 {final['top1']:.3f} after {cfg['train.epochs']} epochs, "
            f">= 0.95 from epoch {best_epoch}, {elapsed:.0f}s")


@criterion(8, "ablation emits the six configurations as a well-formed CSV")
def test_ablation_artifact(tmp_path, capsys):
    out = tmp_path / "ablation.csv"
    assert main(["ablate", *tiny_args(), "--set", "train.epochs=1", "--out", str(out)]) == 0
    text = out.read_text()
    assert capsys.readouterr().out == text
    rows = list(csv.DictReader(io.StringIO(text)))
    assert [r["label"] for r in rows] == [label for label, _ in ABLATION_ROWS]
    assert rows[0]["label"] == "without deformable" and rows[-1]["label"].endswith("λ=0.005")
    for r in rows:
        assert 0.0 <= float(r["top1"]) <= float(r["top5"]) <= 1.0
        assert re.fullmatch(r"[0-9a-f]{16}", r["config_hash"])
    assert len({r["config_hash"] for r in rows}) == 6


@criterion(9, "two training runs with one seed give byte-identical metrics and checkpoint")
def test_train_determinism(tmp_path):
    for name in ("a", "b"):
        args = ["train", *tiny_args(), "--set", "adaptor.mode=laplacian", "--seed", "3",
                "--epochs", "2", "--out", str(tmp_path / name)]
        assert main(args) == 0
    for f in ("metrics.csv", "checkpoint.dckp"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def _toy_configs():
    return [
        ModelConfig(input_h=8, input_T=8, patch=1, patch_stride=1, stages=[
            StageSpec(depth=1, channels=8, heads=2, kind="vanilla"),
            StageSpec(depth=1, channels=8, heads=2, kind="deformable", groups=1, r=2)]),
        ModelConfig(input_h=16, input_T=32, patch=2, patch_stride=2, num_verbs=5, num_nouns=3,
                    adaptor=AdaptorConfig(enabled=False), stages=[
            StageSpec(depth=2, channels=8, heads=2, kind="vanilla"),
            StageSpec(depth=1, channels=16, heads=4, kind="deformable", merge=True, r=2, groups=2)]),
        ModelConfig(input_h=34, input_T=18, patch=4, patch_stride=2, stages=[
            StageSpec(depth=1, channels=12, heads=3, kind="deformable", r=1, groups=3, offset_stride=2),
            StageSpec(depth=1, channels=24, heads=4, kind="vanilla", merge=True)]),
    ]


def _tally(cfg):
    with mac_tally() as t:
        DATAR(cfg, seed=0)(np.zeros((cfg.input_h, cfg.input_T)))
    return t[0]


@criterion(10, "analytic MAC count equals the per-layer tally; grows with size")
def test_mac_counter():
    for cfg in _toy_configs():
        assert count_macs(cfg) == _tally(cfg)
    base = _toy_configs()[0]
    bigger = [
        ModelConfig(**{**vars(base), "input_h": 16, "input_T": 16}),
        ModelConfig(**{**vars(base), "stages": [
            StageSpec(depth=2, channels=8, heads=2, kind="vanilla"), base.stages[1]]}),
        ModelConfig(**{**vars(base), "stages": [
            StageSpec(depth=1, channels=16, heads=2, kind="vanilla"),
            StageSpec(depth=1, channels=16, heads=2, kind="deformable", groups=1, r=2)]}),
    ]
    for cfg in bigger:
        assert count_macs(cfg) > count_macs(base)
        assert count_macs(cfg) == _tally(cfg)
    return f"default 64x64 model: {count_macs(ModelConfig()):,} MACs"
