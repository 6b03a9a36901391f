"""Command-line entry point: synth, extract, split, train, eval, ablate, report.

Every command records a run manifest (resolved configuration plus a content
hash) and stamps that hash into the files it writes: JSON outputs carry a
``manifest_hash`` field, checkpoints carry it as a key, and CSV outputs get a
``<name>.manifest.json`` sidecar.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import yaml
from filelock import FileLock, Timeout

from . import CLASS_ABBREV, __version__
from .dataset import SplitSpec, class_counts, ingest, load_rgb, patient_split, split_summary
from .engine import (
    ABLATION_GRID,
    TileStore,
    TrainConfig,
    evaluate,
    format_report,
    load_checkpoint,
    metrics_document,
    run_ablation,
    train_one,
)
from .errors import ConfigError, OsteoNetError
from .metrics import aggregate_runs, format_table1, format_table2, MetricTable
from .radiomics import extract, read_feature_cache, write_feature_cache
from .synth import synth_generate

logger = logging.getLogger("osteonet")

# config keys that are paths or grid options rather than TrainConfig fields
PATH_KEYS = ("data", "features", "split", "out", "annotations", "id_regex")
GRID_KEYS = ("backbone_override", "baseline_head", "rows")


class CommandError(OsteoNetError):
    """A command whose postcondition cannot be met."""


# -- manifest -------------------------------------------------------------------


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()


def content_hash(payload: bytes) -> str:
    """Git-style blob hash: sha1 over ``blob <len>\\0<payload>``."""
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(root, skip=("manifest.json",)) -> str:
    """Digest over relative paths and contents of every file under ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file() and p.name not in skip):
        h.update(path.relative_to(root).as_posix().encode() + b"\0" + file_digest(path).encode())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    config_path: Optional[str] = None
    inputs: dict = field(default_factory=dict)
    started: float = field(default_factory=time.time)
    finished: Optional[float] = None

    @property
    def hash(self) -> str:
        # timestamps are excluded so identical invocations share a hash
        return content_hash(_canonical({
            "command": self.command, "config": self.config, "inputs": self.inputs, "version": __version__,
        }))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(hash=self.hash, version=__version__)
        return d

    def write(self, path) -> Path:
        self.finished = time.time()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


def _write_json(path: Path, doc: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- config -------------------------------------------------------------------


def _parse_value(text: str):
    return yaml.safe_load(text)


def load_config(path, overrides=()) -> tuple[dict, dict]:
    """Read a YAML config and apply ``key=value`` overrides.

    Returns ``(train_fields, other)``: TrainConfig fields and the path and
    grid options.
    """
    raw = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a mapping at the top level")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        raw[key.strip()] = _parse_value(value)
    other = {k: raw.pop(k) for k in list(raw) if k in PATH_KEYS + GRID_KEYS}
    return raw, other


def _train_config(train_fields: dict, args) -> TrainConfig:
    cfg = TrainConfig.from_dict(train_fields)
    flags = {
        "backbone": args.backbone, "lr": args.lr, "max_epochs": args.max_epochs,
        "embed_dim": args.embed_dim, "batch_size": args.batch_size,
    }
    flags = {k: v for k, v in flags.items() if v is not None}
    return replace(cfg, **flags) if flags else cfg


# -- helpers ------------------------------------------------------------------


class _Paths:
    def __init__(self, workdir):
        self.workdir = Path(workdir).resolve()

    def __call__(self, p) -> Optional[Path]:
        if p is None:
            return None
        p = Path(p).expanduser()
        return p if p.is_absolute() else self.workdir / p


def _require(value, name):
    if value is None:
        raise ConfigError(f"missing required option --{name.replace('_', '-')} (or '{name}' in the config file)")
    return value


def _store(paths, data, features, id_regex, annotations, need_features=True) -> TileStore:
    tiles = ingest(paths(data), **_ingest_kwargs(paths, id_regex, annotations))
    if not tiles:
        raise CommandError(f"no labelled tiles found under {paths(data)}")
    feats = read_feature_cache(paths(features)) if features else {}
    if need_features and not feats:
        raise ConfigError("radiomics are enabled but no --features cache was given; run `extract` first")
    return TileStore(tiles, feats)


def _ingest_kwargs(paths, id_regex, annotations):
    kw = {}
    if id_regex:
        kw["id_regex"] = id_regex
    if annotations:
        kw["annotations"] = paths(annotations)
    return kw


def _lock(directory: Path) -> FileLock:
    directory.mkdir(parents=True, exist_ok=True)
    return FileLock(str(directory / ".osteonet.lock"), timeout=0)


# -- commands -----------------------------------------------------------------


def cmd_synth(args, paths) -> int:
    out = paths(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CommandError(f"{out} exists and is not empty; pass --force to write into it anyway")
    manifest = RunManifest("synth", {
        "patients": args.patients, "tiles_per_patient": args.tiles_per_patient,
        "seed": args.seed, "tile_size": args.tile_size,
    })
    try:
        meta = synth_generate(out, args.patients, args.tiles_per_patient, args.seed, args.tile_size)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    meta["manifest_hash"] = manifest.hash
    _write_json(out / "metadata.json", meta)
    manifest.write(out / "manifest.json")
    tiles = ingest(out)
    nt, nvt, vt = class_counts(tiles)
    print(f"wrote {len(tiles)} tiles from {len({t.patient_id for t in tiles})} patients to {out}")
    print(f"class counts NT={nt} NVT={nvt} VT={vt}")
    print(f"checksum {tree_digest(out)}")
    return 0


def cmd_extract(args, paths) -> int:
    data, out = paths(args.data), paths(args.out)
    skipped: list[str] = []
    tiles = ingest(data, skipped=skipped, **_ingest_kwargs(paths, args.id_regex, args.annotations))
    if not tiles:
        raise CommandError(f"no labelled tiles found under {data}")
    rows, failed = [], list(skipped)
    for t in tiles:
        try:
            rows.append((t.tile_id, t.patient_id, t.label, extract(load_rgb(t.image_path))))
        except Exception as exc:  # report every bad tile, then fail once
            logger.error("feature extraction failed for %s: %s", t.tile_id, exc)
            failed.append(t.tile_id)
    manifest = RunManifest("extract", {"id_regex": args.id_regex, "annotations": args.annotations},
                           inputs={"data": tree_digest(data)})
    write_feature_cache(out, rows)
    manifest.inputs["output"] = file_digest(out)
    manifest.write(_sidecar(out))
    print(f"extracted {len(rows)} feature rows to {out}")
    if failed:
        print(f"{len(failed)} tile(s) could not be read or processed:", file=sys.stderr)
        for name in failed:
            print(f"  {name}", file=sys.stderr)
        return 1
    return 0


def cmd_split(args, paths) -> int:
    data, out = paths(args.data), paths(args.out)
    fractions = tuple(float(f) for f in args.fractions.split(","))
    tiles = ingest(data, **_ingest_kwargs(paths, args.id_regex, args.annotations))
    if not tiles:
        raise CommandError(f"no labelled tiles found under {data}")
    split = patient_split(tiles, fractions=fractions, seed=args.seed, attempts=args.attempts)
    manifest = RunManifest("split", {"fractions": list(fractions), "seed": args.seed, "attempts": args.attempts},
                           inputs={"tiles": sorted(t.tile_id for t in tiles)})
    _write_json(out, {**split.to_dict(), "split_hash": split.hash, "manifest_hash": manifest.hash})
    manifest.write(_sidecar(out))
    print(split_summary(split, tiles))
    print(f"split {split.hash} written to {out}")
    return 0


def cmd_train(args, paths) -> int:
    train_fields, other = load_config(paths(args.config), args.set)
    cfg = _train_config(train_fields, args)
    data = _require(args.data or other.get("data"), "data")
    split_path = _require(args.split or other.get("split"), "split")
    out = paths(_require(args.out or other.get("out"), "out"))
    features = args.features or other.get("features")
    seed = args.seed if args.seed is not None else cfg.seeds[0]

    split = SplitSpec.load(paths(split_path))
    store = _store(paths, data, features, other.get("id_regex"), other.get("annotations"), cfg.use_radiomics)
    manifest = RunManifest("train", {**cfg.to_dict(), "seed": seed}, config_path=args.config,
                           inputs={"split": split.hash, "features": file_digest(paths(features)) if features else None})
    try:
        with _lock(out):
            result = train_one(cfg, split, store, seed=seed, run_dir=out,
                               provenance={"manifest_hash": manifest.hash})
            manifest.write(out / "manifest.json")
    except Timeout:
        raise CommandError(f"{out} is locked by another command") from None
    print(f"trained {cfg.backbone} seed {seed}: best epoch {result.best_epoch} of {len(result.history)}, "
          f"lambda=({result.checkpoint['lambda_a']:.3f}, {result.checkpoint['lambda_b']:.3f})")
    print(f"checkpoint written to {out / 'checkpoint.pt'}")
    return 0


def cmd_eval(args, paths) -> int:
    ckpt_path = paths(args.checkpoint)
    checkpoint = load_checkpoint(ckpt_path)
    cfg = TrainConfig.from_dict(checkpoint["config"])
    split = SplitSpec.load(paths(args.split))
    store = _store(paths, args.data, args.features, args.id_regex, args.annotations, cfg.use_radiomics)
    out = paths(args.out) if args.out else ckpt_path.parent / "metrics.json"
    manifest = RunManifest("eval", {"subset": args.subset}, inputs={
        "checkpoint": file_digest(ckpt_path), "split": split.hash,
        "features": file_digest(paths(args.features)) if args.features else None,
    })
    table, records = evaluate(checkpoint, split, store, subset=args.subset)
    doc = metrics_document(table, checkpoint["config_hash"], split_hash=split.hash, seed=checkpoint["seed"],
                           subset=args.subset, backbone=cfg.backbone, hierarchical_loss=cfg.hierarchical_loss,
                           use_radiomics=cfg.use_radiomics, manifest_hash=manifest.hash)
    _write_json(out, doc)
    if args.predictions:
        pred = paths(args.predictions)
        lines = ["tile_id,true_label,predicted," + ",".join(f"p_{c}" for c in CLASS_ABBREV)]
        lines += [f"{r.tile_id},{r.true_label},{r.predicted}," + ",".join(repr(v) for v in r.dist3) for r in records]
        pred.write_text("\n".join(lines) + "\n", encoding="utf-8")
        manifest.write(_sidecar(pred))
    print(format_table1([("this run", cfg.hierarchical_loss, cfg.use_radiomics, _single_run(table))]))
    print(f"metrics written to {out}")
    return 0


def _single_run(table: MetricTable):
    # a one-run table rendered in the same layout, with zero spread
    return aggregate_runs([table, table])


def cmd_ablate(args, paths) -> int:
    train_fields, other = load_config(paths(args.config), args.set)
    base = _train_config(train_fields, args)
    data = _require(args.data or other.get("data"), "data")
    split_path = _require(args.split or other.get("split"), "split")
    out = paths(_require(args.out or other.get("out"), "out"))
    features = args.features or other.get("features")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(base.seeds)
    override = args.backbone_override or other.get("backbone_override")
    baseline_head = args.baseline_head or other.get("baseline_head", "hierarchical")
    keys = other.get("rows")
    rows = [r for r in ABLATION_GRID if keys is None or r.key in keys]
    if not rows:
        raise ConfigError(f"no grid rows selected; known keys: {[r.key for r in ABLATION_GRID]}")

    split = SplitSpec.load(paths(split_path))
    store = _store(paths, data, features, other.get("id_regex"), other.get("annotations"),
                   any(r.use_radiomics for r in rows))
    manifest = RunManifest("ablate", {
        **base.to_dict(), "seeds": seeds, "backbone_override": override, "baseline_head": baseline_head,
        "rows": [r.key for r in rows],
    }, config_path=args.config, inputs={"split": split.hash,
                                        "features": file_digest(paths(features)) if features else None})
    try:
        with _lock(out):
            report = run_ablation(base, split, store, out, seeds=seeds, rows=rows, backbone_override=override,
                                  baseline_head=baseline_head, provenance={"manifest_hash": manifest.hash})
            manifest.write(out / "manifest.json")
    except Timeout:
        raise CommandError(f"{out} is locked by another command") from None
    print(format_report(report))
    incomplete = [r["key"] for r in report["rows"] if r["status"] != "complete"]
    if incomplete:
        print(f"incomplete rows: {incomplete}", file=sys.stderr)
        return 1
    return 0


def cmd_report(args, paths) -> int:
    if args.ablation:
        report = json.loads((paths(args.ablation) / "report.json").read_text(encoding="utf-8"))
        text = format_report(report)
    else:
        docs = [json.loads(paths(p).read_text(encoding="utf-8")) for p in args.metrics]
        if len(docs) < 2:
            raise CommandError("aggregating metrics files needs at least 2 runs")
        agg = aggregate_runs([MetricTable.from_dict(d) for d in docs])
        rows = [(args.name, docs[0].get("hierarchical_loss", False), docs[0].get("use_radiomics", False), agg)]
        text = "\n\n".join([format_table1(rows), format_table2(rows)])
    print(text)
    if args.out:
        paths(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


# -- parser -------------------------------------------------------------------


def _add_data_options(p, required=True):
    p.add_argument("--data", required=required, help="dataset root directory")
    p.add_argument("--id-regex", default=None, help="patient-id pattern (first group is the id)")
    p.add_argument("--annotations", default=None, help="annotation CSV (default: auto-detect in --data)")


def _add_training_options(p):
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--data", default=None)
    p.add_argument("--features", default=None, help="feature cache written by `extract`")
    p.add_argument("--split", default=None, help="split file written by `split`")
    p.add_argument("--out", default=None, help="output run directory")
    p.add_argument("--backbone", default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osteonet", description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default=".", help="base directory for every relative path")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic tile collection")
    p.add_argument("--patients", type=int, default=10)
    p.add_argument("--tiles-per-patient", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tile-size", type=int, default=64)
    p.add_argument("--out", default="synthetic")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="compute the radiomic feature cache")
    _add_data_options(p)
    p.add_argument("--out", default="features.csv")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("split", help="patient-level train/val/test split")
    _add_data_options(p)
    p.add_argument("--fractions", default="0.7,0.1,0.2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--attempts", type=int, default=64)
    p.add_argument("--out", default="split.json")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one model")
    _add_training_options(p)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)
    _add_data_options(p)
    p.add_argument("--features", default=None)
    p.add_argument("--subset", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", default=None, help="metrics file (default: metrics.json next to the checkpoint)")
    p.add_argument("--predictions", default=None, help="optional per-tile predictions CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation grid")
    _add_training_options(p)
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: config seeds)")
    p.add_argument("--backbone-override", default=None, help="use this backbone for every row, e.g. tiny")
    p.add_argument("--baseline-head", choices=("hierarchical", "flat"), default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="print tables from an ablation directory or metrics files")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ablation", default=None, help="directory holding report.json")
    src.add_argument("--metrics", nargs="+", default=None, help="metrics.json files of repeated runs")
    p.add_argument("--name", default="model")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, _Paths(args.workdir))
    except (OsteoNetError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
