"""Flat ``key = value`` run configuration with dotted keys.

Every key has a default and a type taken from that default. Unknown keys are
rejected. Stage keys look like ``model.stages.2.kind = deformable``; the number
of stages is ``model.num_stages``.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .backbone import AdaptorConfig, ModelConfig, StageSpec, default_stages
from .errors import BadConfig

_STAGE_KEY = re.compile(r"^model\.stages\.(\d+)\.(\w+)$")
_STAGE_FIELDS = {f.name: f.type for f in fields(StageSpec)}

BASE_DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "frontend.sample_rate": 43000,
    "frontend.n_mels": 128,
    "frontend.frame_length": 1024,
    "frontend.frame_shift": 430,
    "data.source": "shifted",
    "data.manifest": "",
    "data.eval_manifest": "",
    "data.num_classes": 4,
    "data.n_per_class": 16,
    "data.eval_n_per_class": 0,
    "data.frames": 128,
    "data.snr_db": 10.0,
    "data.event_seconds": 0.3,
    "data.standardize": True,
    "model.patch": 4,
    "model.patch_stride": 4,
    "model.num_classes": 4,
    "model.num_verbs": 0,
    "model.num_nouns": 0,
    "model.mlp_ratio": 4,
    "model.num_stages": 4,
    "adaptor.enabled": True,
    "adaptor.lambda": 0.005,
    "adaptor.kernel": 5,
    "adaptor.mode": "learned",
    "adaptor.noise_scale": 0.005,
    "optim.lr": 1e-5,
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    "optim.eps": 1e-8,
    "optim.weight_decay": 0.01,
    "optim.batch_size": 8,
    "train.epochs": 60,
}

CHOICES = {
    "data.source": ("shifted", "manifest"),
    "adaptor.mode": ("learned", "gaussian", "laplacian", "off"),
}


def _stage_defaults(i: int) -> StageSpec:
    plan = default_stages()
    if i < len(plan):
        return plan[i]
    return StageSpec(depth=1, channels=16 * 2 ** i, heads=2 ** i, kind="vanilla", merge=True)


def _parse_value(key: str, raw: str, like: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise BadConfig(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class RunConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @classmethod
    def defaults(cls) -> "RunConfig":
        vals = dict(BASE_DEFAULTS)
        for i in range(vals["model.num_stages"]):
            for name, v in vars(_stage_defaults(i)).items():
                vals[f"model.stages.{i}.{name}"] = v
        return cls(vals)

    def with_overrides(self, items: dict[str, str]) -> "RunConfig":
        """Apply textual overrides; num_stages is applied first so stage keys validate."""
        vals = dict(self.values)
        pending = dict(items)
        if "model.num_stages" in pending:
            n = _parse_value("model.num_stages", pending.pop("model.num_stages"), 0)
            if n < 1:
                raise BadConfig("model.num_stages: must be >= 1")
            vals = {k: v for k, v in vals.items() if not _STAGE_KEY.match(k)
                    or int(_STAGE_KEY.match(k).group(1)) < n}
            for i in range(n):
                for name, v in vars(_stage_defaults(i)).items():
                    vals.setdefault(f"model.stages.{i}.{name}", v)
            vals["model.num_stages"] = n
        for key, raw in pending.items():
            if key not in vals:
                raise BadConfig(f"unknown config key: {key}")
            vals[key] = _parse_value(key, raw, vals[key])
            if key in CHOICES and vals[key] not in CHOICES[key]:
                raise BadConfig(f"{key}: must be one of {CHOICES[key]}, got {vals[key]!r}")
        return RunConfig(vals)

    def set(self, **kv: Any) -> "RunConfig":
        """Override with python values; keys use ``__`` for dots (``optim__lr``)."""
        return self.with_overrides({k.replace("__", "."): _format_value(v) for k, v in kv.items()})

    def to_text(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in sorted(self.values.items()))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def model_config(self) -> ModelConfig:
        v = self.values
        stages = []
        for i in range(v["model.num_stages"]):
            stages.append(StageSpec(**{name: v[f"model.stages.{i}.{name}"] for name in _STAGE_FIELDS}))
        adaptor = AdaptorConfig(enabled=v["adaptor.enabled"], lam=v["adaptor.lambda"],
                                kernel=v["adaptor.kernel"], mode=v["adaptor.mode"],
                                noise_scale=v["adaptor.noise_scale"])
        return ModelConfig(
            input_h=v["frontend.n_mels"], input_T=v["data.frames"], stages=stages,
            patch=v["model.patch"], patch_stride=v["model.patch_stride"],
            num_classes=v["model.num_classes"], num_verbs=v["model.num_verbs"],
            num_nouns=v["model.num_nouns"], mlp_ratio=v["model.mlp_ratio"], adaptor=adaptor,
        )


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadConfig(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise BadConfig(f"{source}:{lineno}: empty key")
        items[key] = val
    return items


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    items: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise BadConfig(f"config file not found: {p}")
        items.update(parse_text(p.read_text(), str(p)))
    items.update(overrides or {})
    return RunConfig.defaults().with_overrides(items)


def config_from_text(text: str) -> RunConfig:
    return RunConfig.defaults().with_overrides(parse_text(text))
