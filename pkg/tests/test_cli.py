import json

import pytest
import yaml

from osteonet.cli import RunManifest, content_hash, load_config, main, tree_digest
from osteonet.errors import ConfigError

TINY = {
    "backbone": "tiny", "pretrained": False, "embed_dim": 16, "rad_hidden": 16, "gate_hidden": 16,
    "input_size": 32, "lr": 0.001, "max_epochs": 1,
}


def run(workdir, *argv):
    return main(["--workdir", str(workdir), *argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    wd = tmp_path_factory.mktemp("cli")
    assert run(wd, "synth", "--patients", "10", "--tiles-per-patient", "30", "--seed", "1", "--out", "data") == 0
    assert run(wd, "extract", "--data", "data", "--out", "features.csv") == 0
    assert run(wd, "split", "--data", "data", "--seed", "0", "--out", "split.json") == 0
    (wd / "cfg.yaml").write_text(yaml.safe_dump({**TINY, "data": "data", "features": "features.csv",
                                                  "split": "split.json"}))
    return wd


def test_git_style_hash():
    # the well-known git hash of an empty blob
    assert content_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


def test_manifest_hash_ignores_time():
    a = RunManifest("x", {"k": 1}, started=0.0)
    b = RunManifest("x", {"k": 1}, started=99.0)
    assert a.hash == b.hash != RunManifest("x", {"k": 2}).hash


class TestSynth:
    def test_outputs(self, workspace, capsys):
        meta = json.loads((workspace / "data" / "metadata.json").read_text())
        manifest = json.loads((workspace / "data" / "manifest.json").read_text())
        assert meta["manifest_hash"] == manifest["hash"]
        assert len(list((workspace / "data").rglob("*.png"))) == 300

    def test_refuses_non_empty(self, workspace):
        assert run(workspace, "synth", "--out", "data") == 1

    def test_same_flags_same_checksum(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(tmp_path, "synth", "--patients", "3", "--tiles-per-patient", "5", "--seed", "4",
                       "--out", name) == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
        lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("checksum")]
        assert len(lines) == 2 and lines[0] == lines[1]

    def test_two_patients_rejected(self, tmp_path):
        assert run(tmp_path, "synth", "--patients", "2", "--out", "x") == 1


class TestExtract:
    def test_schema(self, workspace):
        lines = (workspace / "features.csv").read_text().splitlines()
        assert len(lines) == 301
        assert len(lines[0].split(",")) == 3 + 29
        sidecar = json.loads((workspace / "features.csv.manifest.json").read_text())
        assert sidecar["command"] == "extract"

    def test_rerun_identical(self, workspace):
        before = (workspace / "features.csv").read_bytes()
        assert run(workspace, "extract", "--data", "data", "--out", "features2.csv") == 0
        assert (workspace / "features2.csv").read_bytes() == before

    def test_unreadable_tile_fails(self, tmp_path):
        run(tmp_path, "synth", "--patients", "3", "--tiles-per-patient", "4", "--out", "d")
        victim = sorted((tmp_path / "d").rglob("*.png"))[0]
        victim.write_bytes(b"garbage")
        assert run(tmp_path, "extract", "--data", "d", "--out", "f.csv") == 1
        assert len((tmp_path / "f.csv").read_text().splitlines()) == 1 + 11

    def test_no_tiles(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert run(tmp_path, "extract", "--data", "empty") == 1


class TestSplit:
    def test_file(self, workspace):
        doc = json.loads((workspace / "split.json").read_text())
        assert len(doc["train"]) + len(doc["val"]) + len(doc["test"]) == 10
        assert "manifest_hash" in doc and "split_hash" in doc

    def test_deterministic(self, workspace):
        assert run(workspace, "split", "--data", "data", "--seed", "0", "--out", "split2.json") == 0
        assert (workspace / "split2.json").read_bytes() == (workspace / "split.json").read_bytes()

    def test_infeasible(self, tmp_path, capsys):
        run(tmp_path, "synth", "--patients", "3", "--tiles-per-patient", "3", "--out", "d")
        assert run(tmp_path, "split", "--data", "d", "--fractions", "0.5,0.5") == 1


@pytest.fixture(scope="module")
def trained(workspace):
    assert run(workspace, "train", "--config", "cfg.yaml", "--seed", "0", "--out", "run0") == 0
    return workspace / "run0"


class TestTrainEval:
    def test_run_directory(self, trained):
        names = {p.name for p in trained.iterdir()}
        assert {"checkpoint.pt", "history.csv", "loss_components.csv", "manifest.json"} <= names

    def test_checkpoint_carries_manifest(self, trained):
        from osteonet.engine import load_checkpoint

        manifest = json.loads((trained / "manifest.json").read_text())
        assert load_checkpoint(trained / "checkpoint.pt")["manifest_hash"] == manifest["hash"]

    def test_eval_schema_and_purity(self, workspace, trained):
        jsonschema = pytest.importorskip("jsonschema")
        from osteonet.metrics import METRICS_SCHEMA

        args = ["eval", "--checkpoint", "run0/checkpoint.pt", "--split", "split.json", "--data", "data",
                "--features", "features.csv"]
        assert run(workspace, *args) == 0
        first = (trained / "metrics.json").read_bytes()
        assert run(workspace, *args, "--predictions", "pred.csv") == 0
        assert (trained / "metrics.json").read_bytes() == first
        doc = json.loads(first)
        jsonschema.validate(doc, METRICS_SCHEMA)
        assert doc["manifest_hash"] and doc["use_radiomics"] is True
        assert len((workspace / "pred.csv").read_text().splitlines()) > 1

    def test_eval_wrong_split(self, workspace, trained):
        other = json.loads((workspace / "split.json").read_text())
        other["seed"] = 123
        (workspace / "other.json").write_text(json.dumps(other))
        assert run(workspace, "eval", "--checkpoint", "run0/checkpoint.pt", "--split", "other.json",
                   "--data", "data", "--features", "features.csv") == 1

    def test_flag_override(self, workspace):
        assert run(workspace, "train", "--config", "cfg.yaml", "--set", "head=flat", "--set",
                   "hierarchical_loss=false", "--set", "use_radiomics=false", "--out", "run_flat") == 0
        manifest = json.loads((workspace / "run_flat" / "manifest.json").read_text())
        assert manifest["config"]["head"] == "flat"

    def test_locked_directory(self, workspace):
        from filelock import FileLock

        (workspace / "busy").mkdir()
        with FileLock(str(workspace / "busy" / ".osteonet.lock")):
            assert run(workspace, "train", "--config", "cfg.yaml", "--out", "busy") == 1

    def test_bad_config_key(self, workspace):
        assert run(workspace, "train", "--config", "cfg.yaml", "--set", "learning_rate=1", "--out", "x") == 1


@pytest.mark.slow
def test_ablate_and_report(workspace, capsys):
    assert run(workspace, "ablate", "--config", "cfg.yaml", "--seeds", "0,1", "--backbone-override", "tiny",
               "--out", "abl") == 0
    report = json.loads((workspace / "abl" / "report.json").read_text())
    assert len(report["rows"]) == 7
    assert report["manifest_hash"] == json.loads((workspace / "abl" / "manifest.json").read_text())["hash"]
    capsys.readouterr()
    assert run(workspace, "report", "--ablation", "abl", "--out", "report.txt") == 0
    assert "IncV3 (Ours)" in capsys.readouterr().out
    m = [f"abl/runs/incv3/{s}/metrics.json" for s in (0, 1)]
    assert run(workspace, "report", "--metrics", *m, "--name", "IncV3") == 0


def test_load_config_overrides(tmp_path):
    (tmp_path / "c.yaml").write_text("lr: 0.1\ndata: here\n")
    train, other = load_config(tmp_path / "c.yaml", ["lr=0.5", "max_epochs=3"])
    assert train == {"lr": 0.5, "max_epochs": 3} and other == {"data": "here"}
    with pytest.raises(ConfigError):
        load_config(None, ["no_equals"])


@pytest.mark.parametrize("name", ["full.yaml", "synthetic.yaml"])
def test_shipped_configs_parse(name):
    from pathlib import Path

    from osteonet.engine import TrainConfig

    train, other = load_config(Path(__file__).parents[1] / "configs" / name)
    TrainConfig.from_dict(train)
    assert {"data", "features", "split"} <= set(other)
