"""Loss, optimizer, training loop, metrics and the ablation runner."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .autodiff import Tensor, _node, add, as_tensor, scale
from .backbone import DATAR, save_checkpoint
from .config import RunConfig
from .errors import BadLabel, ConfigMismatch, DataEmpty, ShapeMismatch
from .frontend import Waveform, fbank, read_spec, standardize
from .synth import clip_samples, gen_shifted_task

log = logging.getLogger(__name__)

Label = Union[int, tuple[int, int]]


@dataclass
class Example:
    values: np.ndarray  # mel bins x frames, already normalized if configured
    label: Label


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """``-log softmax(logits)[label]`` via log-sum-exp."""
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeMismatch(f"logits must be 1-D, got {logits.shape}")
    K = logits.shape[0]
    if not 0 <= int(label) < K:
        raise BadLabel(f"label {label} outside 0..{K - 1}")
    x = logits.data
    mx = x.max()
    sh = np.exp(x - mx)
    tot = sh.sum()
    loss = mx + np.log(tot) - x[label]

    def bw(g):
        p = sh / tot
        p[label] -= 1.0
        return (g * p,)

    return _node(np.array(loss), (logits,), bw)


def example_loss(out, label: Label) -> Tensor:
    if isinstance(out, tuple):
        verb, noun = label
        return scale(add(cross_entropy(out[0], verb), cross_entropy(out[1], noun)), 0.5)
    return cross_entropy(out, label)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], st: OptimState) -> None:
    """One AdamW update in place. Missing gradients count as zero."""
    if not st.m:
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
    if len(st.m) != len(params):
        raise ShapeMismatch("optimizer state does not match parameter list")
    st.step += 1
    b1, b2 = st.beta1, st.beta2
    c1 = 1.0 - b1 ** st.step
    c2 = 1.0 - b2 ** st.step
    for p, g, m, v in zip(params, grads, st.m, st.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape}")
        p.data *= 1.0 - st.lr * st.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


# --------------------------------------------------------------------------
# metrics


def ranked(logits: np.ndarray) -> np.ndarray:
    """Class indices by descending logit, ties to the lower index."""
    return np.lexsort((np.arange(len(logits)), -logits))


def topk_hit(logits: np.ndarray, label: int, k: int) -> bool:
    return bool(label in ranked(logits)[:k])


METRIC_HEADER = ["epoch", "split", "loss", "top1", "top5"]
DUAL_HEADER = ["verb_top1", "noun_top1", "action"]


@dataclass
class RunMetrics:
    dual: bool = False
    rows: list[dict] = field(default_factory=list)

    def add(self, epoch: int, split: str, stats: dict) -> None:
        self.rows.append({"epoch": epoch, "split": split, **stats})

    def last(self, split: str) -> dict:
        return next(r for r in reversed(self.rows) if r["split"] == split)

    def to_csv(self) -> str:
        header = METRIC_HEADER + (DUAL_HEADER if self.dual else [])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in self.rows:
            w.writerow([r[h] if h in ("epoch", "split") else repr(float(r[h])) for h in header])
        return buf.getvalue()


class _Tally:
    def __init__(self, dual: bool):
        self.dual = dual
        self.n = 0
        self.loss = 0.0
        self.c = {"top1": 0, "top5": 0, "verb_top1": 0, "noun_top1": 0, "action": 0,
                  "verb_top5": 0, "noun_top5": 0}

    def update(self, out, label: Label, loss: float) -> None:
        self.n += 1
        self.loss += loss
        if self.dual:
            v_ok = topk_hit(out[0].data, label[0], 1)
            n_ok = topk_hit(out[1].data, label[1], 1)
            self.c["verb_top1"] += v_ok
            self.c["noun_top1"] += n_ok
            self.c["action"] += v_ok and n_ok
            self.c["verb_top5"] += topk_hit(out[0].data, label[0], 5)
            self.c["noun_top5"] += topk_hit(out[1].data, label[1], 5)
        else:
            self.c["top1"] += topk_hit(out.data, label, 1)
            self.c["top5"] += topk_hit(out.data, label, 5)

    def stats(self) -> dict:
        n = max(self.n, 1)
        s = {"loss": self.loss / n}
        if self.dual:
            for k in DUAL_HEADER:
                s[k] = self.c[k] / n
            s["top1"] = (self.c["verb_top1"] + self.c["noun_top1"]) / (2 * n)
            s["top5"] = (self.c["verb_top5"] + self.c["noun_top5"]) / (2 * n)
        else:
            s["top1"] = self.c["top1"] / n
            s["top5"] = self.c["top5"] / n
        return s


def evaluate(model: DATAR, data: Sequence[Example]) -> dict:
    """Mean loss and top-k accuracies; no noise or parameter updates."""
    if not data:
        raise DataEmpty("evaluation set is empty")
    t = _Tally(model.cfg.dual)
    for ex in data:
        out = model(ex.values)
        t.update(out, ex.label, example_loss(out, ex.label).item())
    return t.stats()


# --------------------------------------------------------------------------
# data


def featurize(waveforms: Sequence[Waveform], cfg: RunConfig) -> list[np.ndarray]:
    feats = []
    for w in waveforms:
        s = fbank(w, cfg["frontend.n_mels"], cfg["frontend.frame_length"], cfg["frontend.frame_shift"])
        feats.append(standardize(s.values) if cfg["data.standardize"] else s.values)
    return feats


def synthetic_split(cfg: RunConfig, seed: int, n_per_class: int) -> list[Example]:
    n = clip_samples(cfg["data.frames"], cfg["frontend.frame_length"], cfg["frontend.frame_shift"])
    clips = gen_shifted_task(seed=seed, n_per_class=n_per_class, num_classes=cfg["data.num_classes"],
                             sample_rate=cfg["frontend.sample_rate"], n_samples=n,
                             snr_db=cfg["data.snr_db"], event_seconds=cfg["data.event_seconds"])
    feats = featurize([c.waveform for c in clips], cfg)
    return [Example(f, c.label) for f, c in zip(feats, clips)]


def read_manifest(path, cfg: RunConfig) -> list[Example]:
    """Load ``path,label[,verb,noun]`` rows; relative paths resolve against the manifest."""
    path = Path(path)
    base = path.parent
    dual = cfg["model.num_verbs"] > 0 and cfg["model.num_nouns"] > 0
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
            raise DataEmpty(f"{path}: manifest needs 'path' and 'label' columns")
        for row in reader:
            spec = read_spec(base / row["path"])
            vals = standardize(spec.values) if cfg["data.standardize"] else spec.values
            if dual:
                if not row.get("verb") or not row.get("noun"):
                    raise ConfigMismatch(f"{path}: dual-head model needs verb and noun columns")
                label: Label = (int(row["verb"]), int(row["noun"]))
            else:
                label = int(row["label"])
            out.append(Example(vals, label))
    if not out:
        raise DataEmpty(f"{path}: manifest has no rows")
    return out


def load_data(cfg: RunConfig) -> tuple[list[Example], Optional[list[Example]]]:
    if cfg["data.source"] == "manifest":
        if not cfg["data.manifest"]:
            raise DataEmpty("data.source = manifest but data.manifest is empty")
        train = read_manifest(cfg["data.manifest"], cfg)
        ev = read_manifest(cfg["data.eval_manifest"], cfg) if cfg["data.eval_manifest"] else None
    else:
        train = synthetic_split(cfg, cfg["seed"], cfg["data.n_per_class"])
        n_eval = cfg["data.eval_n_per_class"]
        ev = synthetic_split(cfg, cfg["seed"] + 7919, n_eval) if n_eval > 0 else None
    return train, ev


def check_extents(model: DATAR, data: Sequence[Example]) -> None:
    want = (model.cfg.input_h, model.cfg.input_T)
    for ex in data:
        if ex.values.shape != want:
            raise ConfigMismatch(f"example of shape {ex.values.shape} does not match model input {want}")


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    metrics: RunMetrics
    model: DATAR


def train(cfg: RunConfig, data: Sequence[Example], eval_data: Optional[Sequence[Example]] = None,
          out_dir=None, epochs: Optional[int] = None) -> TrainResult:
    """Mini-batch AdamW training, deterministic in ``cfg['seed']``.

    Shuffle order, initialization and noise draws all derive from the seed.
    When ``out_dir`` is given, ``metrics.csv`` and ``checkpoint.dckp`` are written there.
    """
    if not data:
        raise DataEmpty("training set is empty")
    seed = cfg["seed"]
    epochs = cfg["train.epochs"] if epochs is None else epochs
    model = DATAR(cfg.model_config(), seed=seed)
    check_extents(model, data)
    if eval_data:
        check_extents(model, eval_data)
    params = model.parameters()
    st = OptimState(lr=cfg["optim.lr"], beta1=cfg["optim.beta1"], beta2=cfg["optim.beta2"],
                    eps=cfg["optim.eps"], weight_decay=cfg["optim.weight_decay"])
    bs = max(1, cfg["optim.batch_size"])
    shuffler = np.random.default_rng([seed, 1])
    metrics = RunMetrics(dual=model.cfg.dual)

    for epoch in range(1, epochs + 1):
        order = shuffler.permutation(len(data))
        tally = _Tally(model.cfg.dual)
        for start in range(0, len(order), bs):
            batch = order[start:start + bs]
            total = None
            for idx in batch:
                ex = data[idx]
                out = model(ex.values, noise_seed=(seed, epoch, int(idx)))
                loss = example_loss(out, ex.label)
                tally.update(out, ex.label, loss.item())
                total = loss if total is None else add(total, loss)
            scale(total, 1.0 / len(batch)).backward()
            adamw_step(params, [p.grad for p in params], st)
            model.zero_grad()
        metrics.add(epoch, "train", tally.stats())
        if eval_data:
            metrics.add(epoch, "eval", evaluate(model, eval_data))
        log.info("epoch %d: %s", epoch, metrics.rows[-1])

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(metrics.to_csv())
        save_checkpoint(out / "checkpoint.dckp", cfg.to_text(), model.state_dict())
    return TrainResult(metrics, model)


# --------------------------------------------------------------------------
# ablation

ABLATION_ROWS = [
    ("without deformable", {"deformable": False, "mode": "off"}),
    ("with deformable", {"deformable": True, "mode": "off"}),
    ("deformable + N(0, 0.005)", {"deformable": True, "mode": "gaussian", "noise": 0.005}),
    ("deformable + L(0, 0.005)", {"deformable": True, "mode": "laplacian", "noise": 0.005}),
    ("deform.+adaptor: λ=0.2", {"deformable": True, "mode": "learned", "lambda": 0.2}),
    ("deform.+adaptor: λ=0.005", {"deformable": True, "mode": "learned", "lambda": 0.005}),
]
ABLATION_HEADER = ["row", "label", "deformable", "adaptor_mode", "lambda", "noise_scale",
                   "config_hash", "top1", "top5"]


def ablation_config(base: RunConfig, spec: dict) -> RunConfig:
    kv: dict = {"adaptor.enabled": spec["mode"] != "off", "adaptor.mode": spec["mode"]}
    if "lambda" in spec:
        kv["adaptor.lambda"] = spec["lambda"]
    if "noise" in spec:
        kv["adaptor.noise_scale"] = spec["noise"]
    if not spec["deformable"]:
        for i in range(base["model.num_stages"]):
            kv[f"model.stages.{i}.kind"] = "vanilla"
    return base.set(**{k.replace(".", "__"): v for k, v in kv.items()})


def ablation_suite(base: RunConfig, data: Sequence[Example],
                   eval_data: Optional[Sequence[Example]] = None) -> list[dict]:
    """Train and score the six ablation configurations; returns one row dict each."""
    rows = []
    for i, (label, spec) in enumerate(ABLATION_ROWS, 1):
        cfg = ablation_config(base, spec)
        res = train(cfg, data)
        stats = evaluate(res.model, eval_data or data)
        rows.append({
            "row": i,
            "label": label,
            "deformable": str(spec["deformable"]).lower(),
            "adaptor_mode": spec["mode"],
            "lambda": repr(spec["lambda"]) if "lambda" in spec else "",
            "noise_scale": repr(spec["noise"]) if "noise" in spec else "",
            "config_hash": cfg.digest(),
            "top1": repr(float(stats["top1"])),
            "top5": repr(float(stats["top5"])),
        })
    return rows


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ABLATION_HEADER, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
