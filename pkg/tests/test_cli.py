import csv
import io

import numpy as np
import pytest

from datar.cli import main
from datar.frontend import Spectrogram, read_spec, write_spec

from helpers import tiny_args


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", *tiny_args(), "--epochs", "1", "--out", str(out)]) == 0
    return out


def test_extract_raw_pcm(tmp_path, capsys):
    x = np.sin(np.arange(43000) * 0.05).astype("<f4")
    x.tofile(tmp_path / "a.pcm")
    assert main(["extract", "--in", str(tmp_path / "a.pcm"), "--out", str(tmp_path / "a.dspc"),
                 "--mels", "32"]) == 0
    s = read_spec(tmp_path / "a.dspc")
    assert capsys.readouterr().out.strip() == f"{s.h}x{s.T}" == "32x98"


def test_extract_missing_input(tmp_path):
    assert main(["extract", "--in", str(tmp_path / "nope.wav"), "--out", str(tmp_path / "o")]) == 3


def test_train_outputs(trained):
    rows = list(csv.DictReader(io.StringIO((trained / "metrics.csv").read_text())))
    assert [r["split"] for r in rows] == ["train"]
    assert (trained / "checkpoint.dckp").stat().st_size > 0


def test_eval_on_manifest(trained, tmp_path, capsys):
    assert main(["synth", *tiny_args(), "--out", str(tmp_path / "d")]) == 0
    capsys.readouterr()
    rc = main(["eval", "--ckpt", str(trained / "checkpoint.dckp"),
               "--data", str(tmp_path / "d" / "manifest.csv"), "--out", str(tmp_path / "e.csv")])
    assert rc == 0
    text = capsys.readouterr().out
    assert text == (tmp_path / "e.csv").read_text()
    assert text.splitlines()[0] == "epoch,split,loss,top1,top5"


def test_viz_offsets(trained, tmp_path):
    write_spec(Spectrogram(np.random.default_rng(0).standard_normal((16, 16))), tmp_path / "s.dspc")
    assert main(["viz-offsets", "--ckpt", str(trained / "checkpoint.dckp"),
                 "--spec", str(tmp_path / "s.dspc"), "--out", str(tmp_path / "o.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "o.csv")))
    assert len(rows) == 2 * 2 * 2  # groups x 4x4 map / r=2
    assert max(abs(float(r["dy"])) for r in rows) <= 2.0 * 2 / 4


def test_viz_adaptor(trained, tmp_path, capsys):
    write_spec(Spectrogram(np.random.default_rng(0).standard_normal((16, 16))), tmp_path / "s.dspc")
    assert main(["viz-adaptor", "--ckpt", str(trained / "checkpoint.dckp"),
                 "--spec", str(tmp_path / "s.dspc"), "--out", str(tmp_path / "img")]) == 0
    for tag in ("before", "after", "diff"):
        raw = (tmp_path / f"img_{tag}.pgm").read_bytes()
        assert raw.startswith(b"P5\n16 16\n255\n") and len(raw) == 13 + 256


def test_gradcheck_sampled(capsys):
    assert main(["gradcheck", "--max-coords", "4"]) == 0
    out = capsys.readouterr().out
    for name in ("adaptor", "offset_generator", "deformable_block", "vanilla_block", "model"):
        assert name in out


def test_gradcheck_impossible_tolerance():
    assert main(["gradcheck", "--max-coords", "2", "--tol", "0"]) == 4


def test_config_errors(tmp_path):
    assert main(["train", "--set", "optim.lrr=1", "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 2
    assert main(["train", *tiny_args(), "--set", "model.stages.1.r=3", "--out", str(tmp_path)]) == 2


def test_bad_checkpoint(tmp_path):
    (tmp_path / "c").write_bytes(b"JUNK")
    assert main(["eval", "--ckpt", str(tmp_path / "c")]) == 3
