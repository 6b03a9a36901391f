"""Joint end-to-end training, evaluation, checkpoints and the ablation grid."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image
from torch.utils.data import DataLoader, Dataset

from .dataset import (
    AccessLog,
    AugmentationPolicy,
    LabeledTile,
    SplitSpec,
    augment,
    load_rgb,
    preprocess,
)
from .errors import ConfigError, IncompatibleCheckpoint, NonFiniteLoss
from .metrics import (
    MetricTable,
    aggregate_runs,
    f1_scores,
    format_table1,
    format_table2,
    metric_table,
    records_from_predictions,
    significance,
)
from .model import ModelConfig, MultimodalNet
from .objective import HierarchicalObjective
from .radiomics import FEATURE_NAMES, FeatureStandardizer

logger = logging.getLogger(__name__)

DETERMINISTIC_ENV = "OSTEONET_DETERMINISTIC"


@dataclass
class TrainConfig:
    backbone: str = "inception_v3"
    pretrained: bool = True
    embed_dim: int = 256
    rad_hidden: int = 128
    gate_hidden: int = 128
    input_size: Optional[int] = None
    head: str = "hierarchical"
    hierarchical_loss: bool = True
    use_radiomics: bool = True
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 10
    eta: float = 0.2
    augment: bool = True
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    deterministic: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be pairwise distinct, got {self.seeds}")
        if self.head == "flat" and self.hierarchical_loss:
            raise ConfigError("the hierarchical loss needs the two-head model (head: hierarchical)")
        self.model_config()  # validates backbone / head / embed_dim

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        d = self.to_dict()
        d.pop("seeds")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def model_config(self, pretrained: Optional[bool] = None) -> ModelConfig:
        return ModelConfig(
            backbone=self.backbone,
            embed_dim=self.embed_dim,
            pretrained=self.pretrained if pretrained is None else pretrained,
            use_radiomics=self.use_radiomics,
            head=self.head,
            rad_hidden=self.rad_hidden,
            gate_hidden=self.gate_hidden,
            input_size=self.input_size,
        )


def set_determinism(seed: int, deterministic: bool = True):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic or os.environ.get(DETERMINISTIC_ENV) == "1":
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False


class TileStore:
    """Tiles plus their cached radiomic features; logs every image read."""

    def __init__(self, tiles: Sequence[LabeledTile], features: Optional[dict] = None, log: Optional[AccessLog] = None):
        self.tiles = list(tiles)
        self.by_id = {t.tile_id: t for t in self.tiles}
        self.features = features or {}
        self.log = log if log is not None else AccessLog()
        self._images: dict[tuple[str, tuple[int, int]], np.ndarray] = {}

    def image(self, tile: LabeledTile, size: tuple[int, int]) -> np.ndarray:
        self.log.record(tile.tile_id)
        key = (tile.tile_id, size)
        if key not in self._images:
            rgb = load_rgb(tile.image_path)
            if rgb.shape[:2] != size:
                rgb = np.asarray(Image.fromarray(rgb).resize((size[1], size[0]), Image.BILINEAR))
            self._images[key] = rgb
        return self._images[key]

    def feature_matrix(self, tiles: Sequence[LabeledTile]) -> np.ndarray:
        missing = [t.tile_id for t in tiles if t.tile_id not in self.features]
        if missing:
            raise ConfigError(f"feature cache lacks {len(missing)} tile(s), e.g. {missing[:3]}; run `extract` first")
        return np.stack([self.features[t.tile_id]["values"] for t in tiles])


class TileDataset(Dataset):
    def __init__(self, store: TileStore, tiles, cfg: TrainConfig, standardizer=None, train=False, seed=0):
        self.store = store
        self.tiles = list(tiles)
        self.cfg = cfg
        self.size = cfg.model_config(pretrained=False).spatial_size
        self.policy = AugmentationPolicy(enabled=train and cfg.augment)
        self.rng = np.random.default_rng(seed)
        if cfg.use_radiomics:
            self.rad = torch.from_numpy(standardizer.apply(store.feature_matrix(self.tiles)).astype(np.float32))
        else:
            self.rad = torch.zeros(len(self.tiles), 0)
        self.labels = torch.tensor([t.label for t in self.tiles], dtype=torch.long)

    def __len__(self):
        return len(self.tiles)

    def __getitem__(self, i):
        img = self.store.image(self.tiles[i], self.size)
        if self.policy.enabled:
            img = augment(img, self.policy, self.rng)
        x = torch.from_numpy(preprocess(img, self.cfg.backbone, size=self.size))
        return x, self.rad[i], self.labels[i], i


@dataclass
class TrainResult:
    checkpoint: dict
    history: list[dict]
    loss_log: list[dict]
    best_epoch: int
    model: MultimodalNet


def _forward(model, x, r, use_radiomics):
    return model(x, r if use_radiomics else None)


def _predict(model, loader, use_radiomics):
    dists, labels, idx = [], [], []
    with torch.no_grad():
        for x, r, y, i in loader:
            out = _forward(model, x, r, use_radiomics)
            dists.append(out.dist3.double())
            labels.append(y)
            idx.append(i)
    return torch.cat(dists).numpy(), torch.cat(labels).numpy(), torch.cat(idx).numpy()


def train_one(
    cfg: TrainConfig,
    split: SplitSpec,
    store: TileStore,
    seed: int = 0,
    run_dir=None,
    provenance: Optional[dict] = None,
) -> TrainResult:
    """Train every parameter group and both log-variances jointly with AdamW.

    Keeps the epoch with the best validation macro-F1 (ties broken by lower
    validation loss) and stops after ``patience`` epochs without improvement.
    Only train and validation tiles are read. ``provenance`` entries (such
    as a manifest hash) are copied into the checkpoint.
    """
    set_determinism(seed, cfg.deterministic)
    train_tiles = split.tiles(store.tiles, "train")
    val_tiles = split.tiles(store.tiles, "val")
    if not train_tiles or not val_tiles:
        raise ConfigError("split has an empty train or validation subset for these tiles")

    standardizer = None
    if cfg.use_radiomics:
        standardizer = FeatureStandardizer.fit(
            store.feature_matrix(train_tiles), source_ids=[t.tile_id for t in train_tiles]
        )

    train_ds = TileDataset(store, train_tiles, cfg, standardizer, train=True, seed=seed)
    val_ds = TileDataset(store, val_tiles, cfg, standardizer, train=False)
    gen = torch.Generator().manual_seed(seed)
    train_loader = DataLoader(train_ds, batch_size=cfg.batch_size, shuffle=True, generator=gen)
    val_loader = DataLoader(val_ds, batch_size=cfg.batch_size * 2, shuffle=False)

    model = MultimodalNet(cfg.model_config())
    objective = HierarchicalObjective(cfg.head, [t.label for t in train_tiles], cfg.eta, cfg.hierarchical_loss)
    weight_digest = objective.class_weight_digest()
    groups = [{"params": list(model.parameters())}]
    if list(objective.parameters()):
        # log-variances are not decayed towards 0
        groups.append({"params": list(objective.parameters()), "weight_decay": 0.0})
    optimizer = torch.optim.AdamW(groups, lr=cfg.lr, weight_decay=cfg.weight_decay)

    history, loss_log = [], []
    best = {"f1": -1.0, "loss": math.inf, "epoch": -1, "state": None}
    best_val_loss = math.inf
    stale = 0
    step = 0
    for epoch in range(cfg.max_epochs):
        model.train()
        running = []
        for x, r, y, i in train_loader:
            comp = objective(_forward(model, x, r, cfg.use_radiomics), y)
            if not torch.isfinite(comp.total):
                _dump_bad_batch(run_dir, epoch, step, [train_tiles[j].tile_id for j in i.tolist()], comp)
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch} step {step}")
            optimizer.zero_grad()
            comp.total.backward()
            optimizer.step()
            joint = float(comp.total.detach())
            running.append(joint)
            loss_log.append({
                "step": step, "L_A": comp.loss_a, "L_B": comp.loss_b,
                "lambda_A": comp.lambda_a, "lambda_B": comp.lambda_b, "joint": joint,
            })
            step += 1

        model.eval()
        val_losses, dists, ys = [], [], []
        with torch.no_grad():
            for x, r, y, i in val_loader:
                out = _forward(model, x, r, cfg.use_radiomics)
                val_losses.append(float(objective(out, y).total) * len(y))
                dists.append(out.dist3)
                ys.append(y)
        val_loss = sum(val_losses) / len(val_ds)
        y_val = torch.cat(ys).numpy()
        val_f1 = f1_scores(y_val, torch.cat(dists).argmax(1).numpy())[0]
        best_val_loss = min(best_val_loss, val_loss)

        improved = val_f1 > best["f1"] or (val_f1 == best["f1"] and val_loss < best["loss"])
        if improved:
            best.update(f1=val_f1, loss=val_loss, epoch=epoch,
                        state=(copy.deepcopy(model.state_dict()), copy.deepcopy(objective.state_dict())))
            stale = 0
        else:
            stale += 1
        lam_a, lam_b = _lambdas(objective)
        history.append({
            "epoch": epoch, "train_loss": float(np.mean(running)), "val_loss": val_loss,
            "val_f1_macro": val_f1, "best_val_loss": best_val_loss, "best_val_f1": best["f1"],
            "lambda_A": lam_a, "lambda_B": lam_b,
        })
        logger.info("epoch %d train %.4f val %.4f f1 %.3f lambda (%.3f, %.3f)",
                    epoch, history[-1]["train_loss"], val_loss, val_f1, lam_a, lam_b)
        if stale >= cfg.patience:
            break

    if objective.class_weight_digest() != weight_digest:
        raise RuntimeError("class weights changed during training")
    model.load_state_dict(best["state"][0])
    objective.load_state_dict(best["state"][1])
    lam_a, lam_b = _lambdas(objective)
    checkpoint = {
        "model_state": model.state_dict(),
        "objective_state": objective.state_dict(),
        "lambda_a": lam_a,
        "lambda_b": lam_b,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash,
        "split_hash": split.hash,
        "seed": seed,
        "best_epoch": best["epoch"],
        "feature_names": list(FEATURE_NAMES),
        "standardizer": standardizer.state_dict() if standardizer else None,
        "class_weight_digest": weight_digest,
        **(provenance or {}),
    }
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(checkpoint, run_dir / "checkpoint.pt")
        _write_csv(run_dir / "history.csv", history)
        _write_csv(run_dir / "loss_components.csv", loss_log,
                   ["step", "L_A", "L_B", "lambda_A", "lambda_B", "joint"])
    return TrainResult(checkpoint, history, loss_log, best["epoch"], model)


def _lambdas(objective):
    w = getattr(objective, "weighting", None)
    if w is None:
        return 0.0, 0.0
    return float(w.lambda_a.detach()), float(w.lambda_b.detach())


def _dump_bad_batch(run_dir, epoch, step, tile_ids, comp):
    if run_dir is None:
        return
    path = Path(run_dir)
    path.mkdir(parents=True, exist_ok=True)
    (path / "nonfinite_batch.json").write_text(json.dumps({
        "epoch": epoch, "step": step, "tile_ids": tile_ids,
        "L_A": comp.loss_a, "L_B": comp.loss_b, "lambda_A": comp.lambda_a, "lambda_B": comp.lambda_b,
    }, indent=2))


def _write_csv(path, rows, columns=None):
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def save_checkpoint(checkpoint: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint, path)
    return path


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=True)


def model_from_checkpoint(checkpoint: dict) -> tuple[MultimodalNet, TrainConfig]:
    cfg = TrainConfig.from_dict(checkpoint["config"])
    model = MultimodalNet(cfg.model_config(pretrained=False))  # weights come from the checkpoint
    model.load_state_dict(checkpoint["model_state"])
    model.eval()
    return model, cfg


def evaluate(checkpoint: dict, split: SplitSpec, store: TileStore, subset: str = "test"):
    """Metric table and per-tile records of a checkpoint on one subset; read-only."""
    if checkpoint.get("split_hash") != split.hash:
        raise IncompatibleCheckpoint(
            f"checkpoint was trained on split {checkpoint.get('split_hash')}, got split {split.hash}"
        )
    if checkpoint.get("feature_names") != list(FEATURE_NAMES):
        raise IncompatibleCheckpoint("checkpoint radiomic feature names differ from this version")
    model, cfg = model_from_checkpoint(checkpoint)
    standardizer = None
    if cfg.use_radiomics:
        standardizer = FeatureStandardizer.from_state_dict(checkpoint["standardizer"])
    tiles = split.tiles(store.tiles, subset)
    ds = TileDataset(store, tiles, cfg, standardizer, train=False)
    loader = DataLoader(ds, batch_size=cfg.batch_size * 2, shuffle=False)
    dist3, y, idx = _predict(model, loader, cfg.use_radiomics)
    records = records_from_predictions([tiles[j].tile_id for j in idx], y, dist3)
    return metric_table(y, dist3), records


def metrics_document(table: MetricTable, config_hash: str, runs: int = 1, **extra) -> dict:
    doc = table.to_dict()
    doc.update(runs=runs, config_hash=config_hash)
    doc.update(extra)
    return doc


# -- ablation grid -----------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    key: str
    name: str
    backbone: str
    head: str
    hierarchical_loss: bool
    use_radiomics: bool


ABLATION_GRID = (
    AblationRow("incv3_flat3", "IncV3(3-class)", "inception_v3", "flat", False, False),
    AblationRow("vit", "ViT", "vit", "hierarchical", False, False),
    AblationRow("effnet", "EffNet", "efficientnet_b0", "hierarchical", False, False),
    AblationRow("incv3", "IncV3", "inception_v3", "hierarchical", False, False),
    AblationRow("incv3_rad", "IncV3", "inception_v3", "hierarchical", False, True),
    AblationRow("incv3_hloss", "IncV3", "inception_v3", "hierarchical", True, False),
    AblationRow("incv3_hloss_rad", "IncV3 (Ours)", "inception_v3", "hierarchical", True, True),
)
FULL_MODEL_KEY = "incv3_hloss_rad"


def row_config(base: TrainConfig, row: AblationRow, backbone_override: Optional[str] = None,
               baseline_head: str = "hierarchical") -> TrainConfig:
    head = row.head
    if row.key in ("vit", "effnet"):
        head = baseline_head
    return replace(
        base,
        backbone=backbone_override or row.backbone,
        head=head,
        hierarchical_loss=row.hierarchical_loss,
        use_radiomics=row.use_radiomics,
    )


def run_ablation(
    base: TrainConfig,
    split: SplitSpec,
    store: TileStore,
    out_dir,
    seeds: Optional[Sequence[int]] = None,
    rows: Sequence[AblationRow] = ABLATION_GRID,
    backbone_override: Optional[str] = None,
    baseline_head: str = "hierarchical",
    provenance: Optional[dict] = None,
) -> dict:
    """Train and test every grid row for every seed on one shared split.

    Writes ``runs/<row>/<seed>/`` artefacts, ``report.json`` and
    ``report.txt`` under ``out_dir`` and returns the report. A failing row is
    recorded as incomplete instead of aborting the grid.
    """
    out = Path(out_dir)
    seeds = list(seeds if seeds is not None else base.seeds)
    report_rows = []
    for row in rows:
        cfg = row_config(base, row, backbone_override, baseline_head)
        entry = {
            "key": row.key, "name": row.name, "backbone": cfg.backbone, "head": cfg.head,
            "hierarchical_loss": row.hierarchical_loss, "use_radiomics": row.use_radiomics,
            "config_hash": cfg.hash, "split_hash": split.hash, "runs": [], "status": "complete",
        }
        tables = []
        for seed in seeds:
            run_dir = out / "runs" / row.key / str(seed)
            try:
                result = train_one(cfg, split, store, seed=seed, run_dir=run_dir, provenance=provenance)
                table, _ = evaluate(result.checkpoint, split, store)
            except Exception as exc:
                logger.exception("row %s seed %d failed", row.key, seed)
                entry["status"] = "incomplete"
                entry["runs"].append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
                continue
            doc = metrics_document(table, cfg.hash, split_hash=split.hash, seed=seed, backbone=cfg.backbone,
                                   hierarchical_loss=cfg.hierarchical_loss, use_radiomics=cfg.use_radiomics,
                                   **(provenance or {}))
            (run_dir / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
            entry["runs"].append({"seed": seed, "best_epoch": result.best_epoch, "metrics": table.to_dict()})
            tables.append(table)
        entry["aggregate"] = aggregate_runs(tables).to_dict() if len(tables) >= 2 else None
        report_rows.append(entry)

    full = next((r for r in report_rows if r["key"] == FULL_MODEL_KEY), None)
    if full and full["aggregate"]:
        for r in report_rows:
            if r is full or not r["aggregate"]:
                continue
            r["p_vs_full"] = {
                k: significance(full["aggregate"]["values"][k], v) for k, v in r["aggregate"]["values"].items()
            }
    report = {"split_hash": split.hash, "seeds": seeds, "rows": report_rows,
              "significance_test": "Welch two-sided t-test over run-level values", **(provenance or {})}
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(format_report(report) + "\n")
    return report


def format_report(report: dict) -> str:
    from .metrics import RunAggregate

    rows = []
    for r in report["rows"]:
        agg = RunAggregate(**{k: r["aggregate"][k] for k in ("mean", "std", "n_runs", "values")}) if r.get("aggregate") else None
        rows.append((f"{r['name']} [{r['backbone']}]", r["hierarchical_loss"], r["use_radiomics"], agg))
    return "\n\n".join([
        f"Overall summary (split {report['split_hash']}, seeds {report['seeds']})",
        format_table1(rows),
        "Per-class",
        format_table2(rows),
    ])
