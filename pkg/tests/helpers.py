from datar.config import RunConfig

TINY = {
    "frontend.n_mels": "16",
    "data.frames": "16",
    "data.n_per_class": "2",
    "data.event_seconds": "0.1",
    "model.patch": "2",
    "model.patch_stride": "2",
    "model.num_stages": "2",
    "model.stages.0.channels": "8",
    "model.stages.0.heads": "2",
    "model.stages.1.channels": "16",
    "model.stages.1.heads": "4",
    "model.stages.1.kind": "deformable",
    "model.stages.1.merge": "true",
    "model.stages.1.r": "2",
    "model.stages.1.groups": "2",
    "optim.lr": "1e-3",
    "train.epochs": "2",
}


def tiny_config(**extra) -> RunConfig:
    return RunConfig.defaults().with_overrides({**TINY, **extra})


def tiny_args() -> list[str]:
    out = []
    for k, v in TINY.items():
        out += ["--set", f"{k}={v}"]
    return out
