"""Command-line entry point: ``datar <subcommand>``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import frontend
from .backbone import DATAR, load_checkpoint
from .config import RunConfig, config_from_text, load_config
from .errors import (
    BadConfig,
    BadLabel,
    BadMagic,
    BadSpec,
    ConfigMismatch,
    DataEmpty,
    TooShort,
    TruncatedFile,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("datar")


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise BadConfig(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _run_config(args, extra: dict[str, str] | None = None) -> RunConfig:
    ov = _overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        ov["seed"] = str(args.seed)
    ov.update(extra or {})
    return load_config(getattr(args, "config", None), ov)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _model_from_checkpoint(path, overrides: dict[str, str]) -> tuple[RunConfig, DATAR]:
    text, state = load_checkpoint(_require_file(path, "checkpoint"))
    cfg = config_from_text(text).with_overrides(overrides)
    model = DATAR(cfg.model_config(), seed=cfg["seed"])
    model.load_state_dict(state)
    return cfg, model


def _load_input(spec_path, cfg: RunConfig) -> np.ndarray:
    vals = frontend.read_spec(_require_file(spec_path, "spectrogram")).values
    return frontend.standardize(vals) if cfg["data.standardize"] else vals


# --------------------------------------------------------------------------
# subcommands


def cmd_extract(args) -> int:
    src = _require_file(args.inp, "input audio")
    wav = frontend.read_audio(src, args.rate)
    spec = frontend.fbank(wav, args.mels, args.frame_len, args.shift)
    frontend.write_spec(spec, args.out)
    print(f"{spec.h}x{spec.T}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .train import synthetic_split

    cfg = _run_config(args)
    cfg = cfg.set(data__standardize=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg["seed"] + (7919 if args.split == "eval" else 0)
    n = cfg["data.n_per_class"] if args.split == "train" else max(1, cfg["data.eval_n_per_class"])
    examples = synthetic_split(cfg, seed, n)
    lines = ["path,label"]
    for i, ex in enumerate(examples):
        name = f"{args.split}_{i:04d}.dspc"
        frontend.write_spec(frontend.Spectrogram(ex.values), out / name)
        lines.append(f"{name},{ex.label}")
    (out / "manifest.csv").write_text("\n".join(lines) + "\n")
    print(f"{len(examples)} clips -> {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import load_data, train

    extra = {"train.epochs": str(args.epochs)} if args.epochs is not None else {}
    cfg = _run_config(args, extra)
    cfg.model_config().validate()
    out = Path(args.out)
    data, ev = load_data(cfg)
    t0 = time.time()
    res = train(cfg, data, ev, out_dir=out)
    last = res.metrics.last("train")
    print(f"trained {cfg['train.epochs']} epochs in {time.time() - t0:.1f}s: "
          f"loss={last['loss']:.4f} top1={last['top1']:.3f} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import RunMetrics, evaluate, load_data, read_manifest

    ov = _overrides(args.set)
    if args.config:
        ov = {**_overrides_from_file(args.config), **ov}
    cfg, model = _model_from_checkpoint(args.ckpt, ov)
    if args.data:
        data = read_manifest(_require_file(args.data, "manifest"), cfg)
    else:
        train_set, ev = load_data(cfg)
        data = ev or train_set
    stats = evaluate(model, data)
    m = RunMetrics(dual=model.cfg.dual)
    m.add(0, "eval", stats)
    text = m.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _overrides_from_file(path) -> dict[str, str]:
    from .config import parse_text

    p = _require_file(path, "config")
    return parse_text(p.read_text(), str(p))


def cmd_ablate(args) -> int:
    from .train import ablation_csv, ablation_suite, load_data

    cfg = _run_config(args)
    data, ev = load_data(cfg)
    text = ablation_csv(ablation_suite(cfg, data, ev))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .audit import TOLERANCE, run_audit

    t0 = time.time()
    errs = run_audit(size=args.size, seed=args.seed, eps=args.eps, max_coords=args.max_coords)
    worst = 0.0
    for name, err in errs.items():
        status = "ok" if err < args.tol else "FAIL"
        print(f"{name:<18} max_rel_err={err:.3e} {status}")
        worst = max(worst, err)
    print(f"elapsed {time.time() - t0:.1f}s")
    return EXIT_OK if worst < args.tol else EXIT_NUMERIC


def cmd_viz_offsets(args) -> int:
    cfg, model = _model_from_checkpoint(args.ckpt, _overrides(args.set))
    x = _load_input(args.spec, cfg)
    mods = model.deformable_modules()
    if not mods:
        raise ConfigMismatch("checkpoint has no deformable blocks")
    if not 0 <= args.block < len(mods):
        raise BadConfig(f"--block must be in 0..{len(mods) - 1}")
    model(x)
    mod = mods[args.block]
    field = mod.last_offsets
    pts = mod.grid.points
    lines = ["group,gi,gj,ref_y,ref_x,dy,dx"]
    G, hg, tg, _ = field.offsets.shape
    for g in range(G):
        for i in range(hg):
            for j in range(tg):
                dy, dx = field.offsets[g, i, j].tolist()
                ry, rx = pts[i, j].tolist()
                lines.append(f"{g},{i},{j},{ry!r},{rx!r},{dy!r},{dx!r}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"{G * hg * tg} offsets -> {args.out}")
    return EXIT_OK


def write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary PGM, linearly scaled from the image's own min..max."""
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros(img.shape) if hi == lo else (img - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def cmd_viz_adaptor(args) -> int:
    cfg, model = _model_from_checkpoint(args.ckpt, _overrides(args.set))
    x = _load_input(args.spec, cfg)
    after = model.embed_input(x).data[0]
    out = Path(args.out)
    stem = out.with_suffix("")
    # low frequencies at the bottom, as spectrograms are usually drawn
    paths = []
    for tag, img in (("before", x), ("after", after), ("diff", after - x)):
        p = Path(f"{stem}_{tag}.pgm")
        write_pgm(p, np.flipud(img))
        paths.append(str(p))
    print("\n".join(paths))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="datar", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p, seed=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("extract", help="waveform -> log-mel spectrogram file")
    p.add_argument("--in", dest="inp", required=True, help=".wav or raw float32 PCM")
    p.add_argument("--out", required=True)
    p.add_argument("--mels", type=int, default=frontend.N_MELS)
    p.add_argument("--frame-len", type=int, default=frontend.FRAME_LENGTH)
    p.add_argument("--shift", type=int, default=frontend.FRAME_SHIFT)
    p.add_argument("--rate", type=int, default=frontend.SAMPLE_RATE, help="rate of raw PCM input")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synth", help="write a synthetic dataset as spectrogram files + manifest")
    with_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model; writes metrics.csv and checkpoint.dckp")
    with_config(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    with_config(p, seed=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="manifest CSV (default: the configured data source)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the six-row ablation and emit a CSV")
    with_config(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=None,
                   help="sample at most this many entries per tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("viz-offsets", help="dump a deformable block's offset field as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--block", type=int, default=0, help="index among deformable blocks")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_viz_offsets)

    p = sub.add_parser("viz-adaptor", help="adaptor input/output/difference as PGM images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True, help="output stem; _before/_after/_diff.pgm are added")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_viz_adaptor)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (BadConfig, ConfigMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataEmpty, BadMagic, TruncatedFile, TooShort, BadLabel, BadSpec, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
