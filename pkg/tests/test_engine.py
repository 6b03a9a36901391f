import csv
import hashlib
import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from osteonet import engine as E
from osteonet.errors import ConfigError, IncompatibleCheckpoint, NonFiniteLoss
from osteonet.objective import HierarchicalObjective, compute_class_weights


@pytest.fixture(scope="module")
def trained(tmp_path_factory, synth_tiles, synth_features, synth_split):
    cfg = E.TrainConfig(backbone="tiny", pretrained=False, embed_dim=16, rad_hidden=16, gate_hidden=16,
                        lr=1e-3, max_epochs=3, patience=2, input_size=32)
    store = E.TileStore(synth_tiles, synth_features)
    run_dir = tmp_path_factory.mktemp("run")
    result = E.train_one(cfg, synth_split, store, seed=0, run_dir=run_dir)
    return cfg, store, run_dir, result


class TestTrainConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            E.TrainConfig.from_dict({"backbone": "tiny", "learning_rate": 0.1})

    def test_flat_head_rejects_hierarchical_loss(self):
        with pytest.raises(ConfigError):
            E.TrainConfig(head="flat", hierarchical_loss=True)

    def test_duplicate_seeds(self):
        with pytest.raises(ConfigError):
            E.TrainConfig(seeds=[0, 0])

    def test_hash_ignores_seeds(self):
        a = E.TrainConfig(backbone="tiny", seeds=[0, 1])
        assert a.hash == replace(a, seeds=[7, 8]).hash
        assert a.hash != replace(a, lr=1e-3).hash

    def test_round_trip(self, quick_config):
        assert E.TrainConfig.from_dict(quick_config.to_dict()) == quick_config


class TestTraining:
    def test_artifacts(self, trained):
        _, _, run_dir, result = trained
        for name in ("checkpoint.pt", "history.csv", "loss_components.csv"):
            assert (run_dir / name).exists()
        with open(run_dir / "loss_components.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["step", "L_A", "L_B", "lambda_A", "lambda_B", "joint"]
        assert len(rows) == len(result.loss_log) > 0

    def test_lambdas_move(self, trained):
        log = trained[3].loss_log
        assert log[0]["lambda_A"] == 0.0
        assert log[-1]["lambda_A"] != 0.0 and log[-1]["lambda_B"] != 0.0

    def test_selected_epoch_has_best_val_f1(self, trained):
        history = trained[3].history
        best = trained[3].best_epoch
        f1s = [h["val_f1_macro"] for h in history]
        assert f1s[best] == max(f1s)
        tied = [h for h in history if h["val_f1_macro"] == max(f1s)]
        assert history[best]["val_loss"] == min(h["val_loss"] for h in tied)

    def test_test_tiles_untouched(self, synth_tiles, synth_features, synth_split, quick_config):
        store = E.TileStore(synth_tiles, synth_features)
        result = E.train_one(replace(quick_config, max_epochs=1), synth_split, store, seed=1)
        test_ids = [t.tile_id for t in synth_split.tiles(synth_tiles, "test")]
        assert store.log.touched(test_ids) == set()
        E.evaluate(result.checkpoint, synth_split, store)
        assert store.log.touched(test_ids) == set(test_ids)

    def test_standardizer_provenance(self, trained, synth_tiles, synth_split):
        train_ids = sorted(t.tile_id for t in synth_split.tiles(synth_tiles, "train"))
        expected = hashlib.sha256("\n".join(train_ids).encode()).hexdigest()
        assert trained[3].checkpoint["standardizer"]["source_hash"] == expected

    def test_class_weights_recorded(self, trained, synth_tiles, synth_split):
        labels = [t.label for t in synth_split.tiles(synth_tiles, "train")]
        cw = compute_class_weights(labels)
        digest = np.concatenate([cw.beta_a, cw.beta_b]).tobytes().hex()
        assert trained[3].checkpoint["class_weight_digest"] == digest

    def test_deterministic(self, synth_tiles, synth_features, synth_split, quick_config):
        cfg = replace(quick_config, max_epochs=1)
        runs = [E.train_one(cfg, synth_split, E.TileStore(synth_tiles, synth_features), seed=3) for _ in range(2)]
        assert runs[0].loss_log == runs[1].loss_log
        for k, v in runs[0].checkpoint["model_state"].items():
            assert torch.equal(v, runs[1].checkpoint["model_state"][k])

    def test_early_stopping(self, synth_tiles, synth_features, synth_split, quick_config):
        cfg = replace(quick_config, lr=1e-9, max_epochs=10, patience=2)
        result = E.train_one(cfg, synth_split, E.TileStore(synth_tiles, synth_features), seed=0)
        assert len(result.history) <= result.best_epoch + cfg.patience + 1
        assert len(result.history) < cfg.max_epochs

    def test_non_finite_loss(self, tmp_path, synth_tiles, synth_features, synth_split, quick_config, monkeypatch):
        original = HierarchicalObjective.forward

        def poisoned(self, out, y):
            comp = original(self, out, y)
            comp.total = comp.total * float("nan")
            return comp

        monkeypatch.setattr(HierarchicalObjective, "forward", poisoned)
        with pytest.raises(NonFiniteLoss):
            E.train_one(quick_config, synth_split, E.TileStore(synth_tiles, synth_features), run_dir=tmp_path)
        dump = json.loads((tmp_path / "nonfinite_batch.json").read_text())
        assert dump["step"] == 0 and dump["tile_ids"]

    def test_missing_features(self, synth_tiles, synth_split, quick_config):
        with pytest.raises(ConfigError, match="extract"):
            E.train_one(quick_config, synth_split, E.TileStore(synth_tiles, {}))

    def test_flat_baseline_without_features(self, synth_tiles, synth_split, quick_config):
        cfg = replace(quick_config, head="flat", hierarchical_loss=False, use_radiomics=False, max_epochs=1)
        store = E.TileStore(synth_tiles, {})
        result = E.train_one(cfg, synth_split, store)
        table, _ = E.evaluate(result.checkpoint, synth_split, store)
        assert set(table.overall) == {"accuracy", "f1_macro", "f1_weighted", "auc_ovr"}
        assert result.checkpoint["lambda_a"] == 0.0


class TestEvaluate:
    def test_checkpoint_round_trip(self, trained, synth_split):
        _, store, run_dir, result = trained
        before, recs = E.evaluate(result.checkpoint, synth_split, store)
        after, recs2 = E.evaluate(E.load_checkpoint(run_dir / "checkpoint.pt"), synth_split, store)
        assert before.to_dict() == after.to_dict()
        assert recs == recs2

    def test_split_mismatch(self, trained, synth_tiles):
        from osteonet.dataset import patient_split

        other = patient_split(synth_tiles, seed=99)
        assert other.hash != trained[3].checkpoint["split_hash"]
        with pytest.raises(IncompatibleCheckpoint):
            E.evaluate(trained[3].checkpoint, other, trained[1])

    def test_feature_name_mismatch(self, trained, synth_split):
        ckpt = dict(trained[3].checkpoint, feature_names=["x"] * 29)
        with pytest.raises(IncompatibleCheckpoint):
            E.evaluate(ckpt, synth_split, trained[1])

    def test_metrics_document(self, trained, synth_split):
        jsonschema = pytest.importorskip("jsonschema")
        from osteonet.metrics import METRICS_SCHEMA

        table, _ = E.evaluate(trained[3].checkpoint, synth_split, trained[1])
        jsonschema.validate(E.metrics_document(table, trained[0].hash), METRICS_SCHEMA)


class TestAblation:
    def test_grid_shape(self):
        assert len(E.ABLATION_GRID) == 7
        assert E.ABLATION_GRID[-1].key == E.FULL_MODEL_KEY
        flat = E.row_config(E.TrainConfig(), E.ABLATION_GRID[0])
        assert flat.head == "flat" and not flat.hierarchical_loss and not flat.use_radiomics

    def test_backbone_override(self):
        for row in E.ABLATION_GRID:
            assert E.row_config(E.TrainConfig(), row, backbone_override="tiny").backbone == "tiny"

    @pytest.mark.slow
    def test_full_grid(self, tmp_path, synth_tiles, synth_features, synth_split, quick_config):
        cfg = replace(quick_config, max_epochs=1)
        store = E.TileStore(synth_tiles, synth_features)
        report = E.run_ablation(cfg, synth_split, store, tmp_path, seeds=[0, 1], backbone_override="tiny")
        assert len(report["rows"]) == 7
        assert {r["split_hash"] for r in report["rows"]} == {synth_split.hash}
        assert all(r["status"] == "complete" for r in report["rows"])
        assert all("p_vs_full" in r for r in report["rows"] if r["key"] != E.FULL_MODEL_KEY)
        for row in E.ABLATION_GRID:
            for seed in (0, 1):
                d = tmp_path / "runs" / row.key / str(seed)
                assert {p.name for p in d.iterdir()} >= {"checkpoint.pt", "history.csv", "metrics.json",
                                                         "loss_components.csv"}
        text = (tmp_path / "report.txt").read_text()
        assert "IncV3 (Ours)" in text
        assert json.loads((tmp_path / "report.json").read_text())["seeds"] == [0, 1]

    def test_failed_row_marked_incomplete(self, tmp_path, synth_tiles, synth_split, quick_config):
        cfg = replace(quick_config, max_epochs=1)
        store = E.TileStore(synth_tiles, {})  # no features: radiomics rows fail
        rows = [E.ABLATION_GRID[0], E.ABLATION_GRID[-1]]
        report = E.run_ablation(cfg, synth_split, store, tmp_path, seeds=[0, 1], rows=rows,
                                backbone_override="tiny")
        status = {r["key"]: r["status"] for r in report["rows"]}
        assert status == {"incv3_flat3": "complete", E.FULL_MODEL_KEY: "incomplete"}
        assert "(incomplete)" in (tmp_path / "report.txt").read_text()
