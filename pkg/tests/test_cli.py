import csv
import json

import pytest

from ddmm.cli import main
from ddmm.errors import EXIT_NUMERIC, EXIT_OK, EXIT_VALIDATION

TINY = """\
[phantom]
size = 16
n_labeled = 10
n_unlabeled = 4

[model]
base_channels = 4
depth = 1
time_embed_dim = 8
t_max = 5

[train]
epochs = 2
batch_size = 4
vlb_probe = 2

[sampler]
n = 4

[metrics]
max_pairs = 4

[segmenter]
base_channels = 4
depth = 1
epochs = 1
batch_size = 4
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return str(path)


def ddmm(*argv):
    return main(list(argv) + ["-q"])


def pipeline(root, config):
    assert ddmm("gen-data", "--config", config, "--out", str(root / "data")) == EXIT_OK
    assert ddmm("gen-data", "--config", config, "--seed", "7", "--out", str(root / "heldout")) == EXIT_OK
    assert ddmm("train", "--config", config, "--data", str(root / "data"), "--out", str(root / "train")) == EXIT_OK
    assert ddmm("sample", "--config", config, "--checkpoint", str(root / "train" / "checkpoint.ddmm"),
                "--out", str(root / "samples")) == EXIT_OK
    assert ddmm("eval-images", "--config", config, "--real", str(root / "heldout" / "labeled_train"),
                "--fake", str(root / "samples"), "--out", str(root / "quality.csv")) == EXIT_OK
    assert ddmm("train-seg", "--config", config, "--pairs", str(root / "samples"), "--out", str(root / "seg")) == EXIT_OK
    assert ddmm("eval-seg", "--config", config, "--segnet", str(root / "seg" / "segnet.ddmm"),
                "--test", str(root / "data" / "labeled_test"), "--out", str(root / "seg_eval.csv"),
                "--dump-masks") == EXIT_OK
    assert ddmm("report", "--run", str(root)) == EXIT_OK


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_pipeline_is_reproducible(tmp_path, config):
    first, second = tmp_path / "one", tmp_path / "two"
    pipeline(first, config)
    pipeline(second, config)
    a, b = tree(first), tree(second)
    assert a.keys() == b.keys()
    different = [name for name in a if a[name] != b[name]]
    assert different == []

    assert {"data/manifest.json", "train/checkpoint.ddmm", "train/training_log.csv", "samples/pairs.csv",
            "samples/consistency.csv", "quality.csv", "quality.manifest.json", "seg/segnet.ddmm",
            "seg_eval.csv", "seg_eval.manifest.json", "report.csv", "loss_curves.png", "metrics.png"} <= a.keys()
    assert (first / "data" / "labeled_test" / "SPLIT").read_text().strip() == "labeled_test"
    assert len(list((first / "samples" / "images").iterdir())) == 4
    assert len(list((first / "seg_eval_masks").iterdir())) == 2

    data_manifest = json.loads(a["data/manifest.json"])
    assert data_manifest["counts"] == {"labeled_train": 8, "labeled_test": 2, "unlabeled": 4}
    train_manifest = json.loads(a["train/manifest.json"])
    assert train_manifest["epoch"] == 2
    assert len(train_manifest["trained_on"]) == 12
    assert not any("tmp" in arg or "/" in arg for arg in train_manifest["argv"])
    log = list(csv.reader(a["train/training_log.csv"].decode().splitlines()))
    assert [row[0] for row in log] == ["epoch", "1", "2"]


def test_eval_images_of_identical_sets(tmp_path, config):
    assert ddmm("gen-data", "--config", config, "--out", str(tmp_path / "data")) == EXIT_OK
    folder = str(tmp_path / "data" / "labeled_train")
    assert ddmm("eval-images", "--config", config, "--real", folder, "--fake", folder,
                "--out", str(tmp_path / "q.csv")) == EXIT_OK
    row = next(csv.DictReader((tmp_path / "q.csv").open()))
    assert float(row["fid"]) <= 1e-6
    assert row["n_real"] == row["n_fake"] == "8"


def test_outputs_are_not_overwritten_without_force(tmp_path, config):
    out = str(tmp_path / "data")
    assert ddmm("gen-data", "--config", config, "--out", out) == EXIT_OK
    assert ddmm("gen-data", "--config", config, "--out", out) == EXIT_VALIDATION
    assert ddmm("gen-data", "--config", config, "--out", out, "--force") == EXIT_OK


def test_test_split_is_refused_for_training(tmp_path, config):
    assert ddmm("gen-data", "--config", config, "--out", str(tmp_path / "data")) == EXIT_OK
    assert ddmm("train", "--config", config, "--data", str(tmp_path / "data" / "labeled_test"),
                "--out", str(tmp_path / "train")) == EXIT_VALIDATION
    assert not (tmp_path / "train").exists()


def test_resume_continues_training(tmp_path, config):
    assert ddmm("gen-data", "--config", config, "--out", str(tmp_path / "data")) == EXIT_OK
    assert ddmm("train", "--config", config, "--data", str(tmp_path / "data"), "--out", str(tmp_path / "a")) == EXIT_OK
    longer = tmp_path / "longer.ini"
    longer.write_text(TINY.replace("epochs = 2", "epochs = 3"))
    assert ddmm("train", "--config", str(longer), "--data", str(tmp_path / "data"),
                "--resume", str(tmp_path / "a" / "checkpoint.ddmm"), "--out", str(tmp_path / "b")) == EXIT_OK
    assert ddmm("train", "--config", str(longer), "--data", str(tmp_path / "data"), "--out", str(tmp_path / "c")) == EXIT_OK
    assert (tmp_path / "b" / "checkpoint.ddmm").read_bytes() == (tmp_path / "c" / "checkpoint.ddmm").read_bytes()
    assert (tmp_path / "b" / "training_log.csv").read_text().splitlines()[1].startswith("3,")


def test_bad_config_exits_with_one(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nepochs = 2\nwarmup = 3\n")
    assert ddmm("gen-data", "--config", str(bad), "--out", str(tmp_path / "x")) == EXIT_VALIDATION
    assert ddmm("gen-data", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path / "x")) == EXIT_VALIDATION


def test_numeric_failure_exits_with_two(tmp_path, config):
    assert ddmm("gen-data", "--config", config, "--out", str(tmp_path / "data")) == EXIT_OK
    wild = tmp_path / "wild.ini"
    wild.write_text(TINY.replace("vlb_probe = 2", "vlb_probe = 2\nlearning_rate = 1e30"))
    assert ddmm("train", "--config", str(wild), "--data", str(tmp_path / "data"), "--out", str(tmp_path / "t")) == EXIT_NUMERIC


def test_usage_errors(tmp_path, monkeypatch):
    assert main(["train", "--no-such-flag"]) == EXIT_VALIDATION
    assert main(["--version"]) == EXIT_OK
    assert ddmm("sample", "--out", str(tmp_path / "s")) == EXIT_VALIDATION
    monkeypatch.setenv("DDMM_THREADS", "many")
    assert ddmm("gen-data", "--out", str(tmp_path / "d")) == EXIT_VALIDATION
