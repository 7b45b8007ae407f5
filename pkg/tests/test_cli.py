import json
import subprocess
import sys

import pytest

from tsdhead.cli import main

TINY = ["--feat-channels", "8", "--hidden", "16", "--rois", "16", "--batch-size", "4"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["gen-data", "--out", str(out), "--train", "8", "--val", "3", "--seed", "2", "--classes", "3"]) == 0
    return out


def test_gen_data_layout(corpus):
    assert (corpus / "train" / "annotations.jsonl").exists()
    assert len(list((corpus / "val" / "images").glob("*.ppm"))) == 3


def test_train_eval_probe(corpus, tmp_path):
    ckpt = tmp_path / "ckpt"
    args = ["train", "--data", str(corpus), "--mode", "tsd+pc", "--mc", "0.2", "--mr", "0.2", "--gamma", "0.1"]
    assert main(args + ["--epochs", "1", "--seed", "0", "--out", str(ckpt)] + TINY) == 0
    assert (ckpt / "manifest.json").exists()
    row = json.loads((ckpt / "metrics.jsonl").read_text().splitlines()[0])
    assert set(row) == {"epoch", "lcls", "lloc", "ldcls", "ldloc", "mcls", "mloc", "lr"}

    report = tmp_path / "report.json"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(corpus), "--report", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert set(rep["map"]) == {"0.50", "0.60", "0.70", "0.80", "0.90"}
    assert all(0.0 <= v <= 1.0 for v in rep["map"].values())

    prefix = tmp_path / "probe" / "s0"
    assert main(["probe", "--ckpt", str(ckpt), "--data", str(corpus), "--scene", "0", "--instance", "0", "--grid", "5", "--out", str(prefix)]) == 0
    for suffix in (".cls.pgm", ".loc.pgm", ".stats.json"):
        assert (tmp_path / "probe" / f"s0{suffix}").exists()


def test_probe_bad_instance(corpus, tmp_path):
    ckpt = tmp_path / "ckpt"
    main(["train", "--data", str(corpus), "--mode", "sibling", "--epochs", "1", "--out", str(ckpt)] + TINY)
    code = main(["probe", "--ckpt", str(ckpt), "--data", str(corpus), "--scene", "0", "--instance", "9", "--grid", "3", "--out", str(tmp_path / "x")])
    assert code == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "tsdhead", "--help"], capture_output=True, text=True, check=True)
    for cmd in ("gen-data", "train", "eval", "probe"):
        assert cmd in out.stdout
