"""Tile ingestion, hierarchical task labels, patient-level splits, augmentation."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .errors import InfeasibleSplit, InvalidInput, PatientIdError

logger = logging.getLogger(__name__)

NON_TUMOR, NON_VIABLE, VIABLE = 0, 1, 2
IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".tif", ".tiff", ".bmp"}
DEFAULT_ID_REGEX = r"(?i)^(case-\d+)"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
NATIVE_INPUT_SIZE = {
    "inception_v3": 299,
    "vit": 224,
    "efficientnet_b0": 224,
    "tiny": 64,
}


@dataclass(frozen=True)
class LabeledTile:
    tile_id: str
    patient_id: str
    image_path: str
    label: int

    def __post_init__(self):
        if self.label not in (0, 1, 2):
            raise InvalidInput(f"{self.tile_id}: label must be 0, 1 or 2, got {self.label}")
        if not self.patient_id:
            raise InvalidInput(f"{self.tile_id}: empty patient id")


@dataclass(frozen=True)
class TaskLabels:
    """Coarse (non-tumor vs. tumor) and fine (non-viable vs. viable) targets.

    ``y_b`` is None for non-tumor tiles, which take no part in the fine task.
    """

    y_a: int
    y_b: int | None


def derive_task_labels(tile: LabeledTile | int) -> TaskLabels:
    label = tile.label if isinstance(tile, LabeledTile) else int(tile)
    if label == NON_TUMOR:
        return TaskLabels(0, None)
    if label in (NON_VIABLE, VIABLE):
        return TaskLabels(1, label - 1)
    raise InvalidInput(f"label must be 0, 1 or 2, got {label}")


def label_from_task_labels(t: TaskLabels) -> int:
    return 0 if t.y_a == 0 else 1 + int(t.y_b)


# -- ingestion ---------------------------------------------------------------


def parse_label(text: str) -> int | None:
    s = re.sub(r"[\s_]+", "-", str(text).strip().lower())
    if "non-tumor" in s or "nontumor" in s:
        return NON_TUMOR
    if "non-viable" in s or "nonviable" in s or "necro" in s:
        return NON_VIABLE
    if "viable" in s:
        return VIABLE
    return None


def _norm_key(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", Path(name).stem.lower())


def _find_annotation_file(root: Path) -> Path | None:
    for path in sorted(root.glob("*.csv")):
        with open(path, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh), [])
        if "image.name" in header and "classification" in header:
            return path
    return None


def _read_annotations(path: Path) -> dict[str, int]:
    labels = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            label = parse_label(row["classification"])
            if label is not None:
                labels[_norm_key(row["image.name"])] = label
    return labels


def extract_patient_id(rel_path: Path, id_regex: str = DEFAULT_ID_REGEX) -> str:
    """First match of ``id_regex`` on the file name, then on parent folders."""
    pattern = re.compile(id_regex)
    for part in (rel_path.name, *reversed(rel_path.parent.parts)):
        m = pattern.search(part)
        if m:
            return m.group(1) if m.groups() else m.group(0)
    raise PatientIdError(f"cannot parse a patient id from {rel_path} with pattern {id_regex!r}")


def ingest(
    root_dir,
    id_regex: str = DEFAULT_ID_REGEX,
    annotations=None,
    skipped: list | None = None,
) -> list[LabeledTile]:
    """Index every image under ``root_dir`` as a LabeledTile.

    Labels come from an annotation CSV (``image.name``, ``classification``
    columns; auto-detected in ``root_dir`` when not given) or otherwise from a
    folder name such as ``Non-Tumor``. Unreadable or unlabeled images are
    skipped with a warning and appended to ``skipped``. A path without a
    patient id raises PatientIdError, since guessing would risk leakage.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    skipped = [] if skipped is None else skipped
    ann_path = Path(annotations) if annotations else _find_annotation_file(root)
    ann = _read_annotations(ann_path) if ann_path else {}

    tiles = []
    for path in sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_EXTENSIONS):
        rel = path.relative_to(root)
        label = ann.get(_norm_key(path.name))
        if label is None:
            label = next((parse_label(p) for p in reversed(rel.parent.parts) if parse_label(p) is not None), None)
        if label is None:
            logger.warning("no label for %s; skipped", rel)
            skipped.append(str(rel))
            continue
        patient_id = extract_patient_id(rel, id_regex)
        try:
            with Image.open(path) as im:
                im.verify()
        except Exception as exc:  # PIL raises a zoo of types for corrupt files
            logger.warning("unreadable image %s (%s); skipped", rel, exc)
            skipped.append(str(rel))
            continue
        tiles.append(LabeledTile(rel.with_suffix("").as_posix(), patient_id, str(path), label))

    counts = Counter(t.label for t in tiles)
    logger.info(
        "ingested %d tiles from %d patients; class counts %s; skipped %d",
        len(tiles), len({t.patient_id for t in tiles}),
        tuple(counts.get(c, 0) for c in range(3)), len(skipped),
    )
    return tiles


def class_counts(tiles: Iterable[LabeledTile]) -> tuple[int, int, int]:
    c = Counter(t.label for t in tiles)
    return (c.get(0, 0), c.get(1, 0), c.get(2, 0))


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


# -- patient-level split -----------------------------------------------------

SUBSETS = ("train", "val", "test")


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    seed: int = 0
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise InvalidInput("patient sets of a split must be pairwise disjoint")

    def subset_of(self, patient_id: str) -> str | None:
        for name in SUBSETS:
            if patient_id in getattr(self, name):
                return name
        return None

    def tiles(self, tiles: Iterable[LabeledTile], subset: str) -> list[LabeledTile]:
        members = set(getattr(self, subset))
        return [t for t in tiles if t.patient_id in members]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
            "fractions": list(self.fractions),
        }

    @property
    def hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k != "fractions"}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "SplitSpec":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            train=tuple(d["train"]),
            val=tuple(d["val"]),
            test=tuple(d["test"]),
            seed=int(d["seed"]),
            fractions=tuple(d.get("fractions", (0.7, 0.1, 0.2))),
        )


def _patient_class_counts(tiles):
    counts: dict[str, np.ndarray] = {}
    for t in tiles:
        counts.setdefault(t.patient_id, np.zeros(3, dtype=np.int64))[t.label] += 1
    return counts


def patient_split(
    tiles: Sequence[LabeledTile],
    fractions: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
    attempts: int = 64,
) -> SplitSpec:
    """Assign whole patients to train/val/test.

    Each attempt walks a seeded random patient order: first it gives every
    subset (smallest target first) one holder of each class it lacks, then it
    hands the remaining patients to whichever subset is furthest below its
    target tile count. The feasible attempt closest to the target fractions
    wins.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1) > 1e-6:
        raise InvalidInput(f"fractions must be three positive numbers summing to 1, got {fractions}")
    counts = _patient_class_counts(tiles)
    patients = sorted(counts)
    if len(patients) < 3:
        raise InfeasibleSplit(f"need at least 3 patients for a 3-way split, found {len(patients)}")
    for c in range(3):
        holders = [p for p in patients if counts[p][c] > 0]
        if len(holders) < 3:
            raise InfeasibleSplit(
                f"class {c} is held by {len(holders)} patient(s) {holders}; "
                "every subset needs one, so at least 3 are required"
            )

    total = sum(int(v.sum()) for v in counts.values())
    targets = np.array(fractions) * total
    fill_order = np.argsort(fractions, kind="stable")
    rng = np.random.default_rng(seed)
    best, best_dev = None, np.inf

    for _ in range(attempts):
        order = [patients[i] for i in rng.permutation(len(patients))]
        assigned: dict[str, int] = {}
        sub_counts = np.zeros((3, 3), dtype=np.int64)

        for s in fill_order:
            for c in range(3):
                if sub_counts[s, c] > 0:
                    continue
                pick = next((p for p in order if p not in assigned and counts[p][c] > 0), None)
                if pick is None:
                    break
                assigned[pick] = s
                sub_counts[s] += counts[pick]
        for p in order:
            if p in assigned:
                continue
            s = int(np.argmax(targets - sub_counts.sum(axis=1)))
            assigned[p] = s
            sub_counts[s] += counts[p]

        if (sub_counts > 0).all():
            dev = float(np.abs(sub_counts.sum(axis=1) / total - fractions).sum())
            if dev < best_dev:
                best, best_dev = dict(assigned), dev

    if best is None:
        raise InfeasibleSplit(
            f"no assignment covering every class in every subset found in {attempts} attempts; "
            f"per-patient class counts: { {p: counts[p].tolist() for p in patients} }"
        )
    members = [tuple(sorted(p for p, s in best.items() if s == i)) for i in range(3)]
    return SplitSpec(*members, seed=seed, fractions=fractions)


def split_summary(split: SplitSpec, tiles: Sequence[LabeledTile]) -> str:
    lines = [f"{'subset':<6} {'patients':>8} {'tiles':>6} {'frac':>6}   NT  NVT   VT"]
    total = len(tiles)
    for name in SUBSETS:
        sub = split.tiles(tiles, name)
        nt, nvt, vt = class_counts(sub)
        lines.append(
            f"{name:<6} {len(getattr(split, name)):>8} {len(sub):>6} {len(sub) / max(total, 1):>6.3f} "
            f"{nt:>4} {nvt:>4} {vt:>4}"
        )
    return "\n".join(lines)


# -- augmentation and preprocessing -------------------------------------------


@dataclass(frozen=True)
class AugmentationPolicy:
    horizontal_flip_prob: float = 0.5
    rotation_range_degrees: float = 15.0
    enabled: bool = True


@dataclass(frozen=True)
class AugmentDraw:
    flip: bool = False
    angle: float = 0.0


def draw_augmentation(policy: AugmentationPolicy, rng: np.random.Generator) -> AugmentDraw:
    if not policy.enabled:
        return AugmentDraw()
    flip = bool(rng.random() < policy.horizontal_flip_prob)
    r = policy.rotation_range_degrees
    return AugmentDraw(flip, float(rng.uniform(-r, r)))


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, ::-1])


def apply_augmentation(image: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    out = np.asarray(image)
    if draw.flip:
        out = hflip(out)
    if draw.angle != 0.0:
        rotated = ndimage.rotate(
            out.astype(np.float64), draw.angle, axes=(1, 0), reshape=False, order=1, mode="reflect"
        )
        if np.issubdtype(out.dtype, np.integer):
            rotated = np.clip(np.rint(rotated), 0, 255)
        out = rotated.astype(out.dtype)
    return out


def augment(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip and small rotation with reflected borders."""
    return apply_augmentation(image, draw_augmentation(policy, rng))


def preprocess(image: np.ndarray, backbone_kind: str = "inception_v3", size=None) -> np.ndarray:
    """Resize to the backbone's input size and ImageNet-normalize; returns CxHxW float32.

    ``image`` is HxWx3 on the 0-255 scale; ``size`` (int or (h, w)) overrides
    the backbone's native size.
    """
    if size is None:
        if backbone_kind not in NATIVE_INPUT_SIZE:
            raise InvalidInput(f"no native input size known for backbone {backbone_kind!r}")
        size = NATIVE_INPUT_SIZE[backbone_kind]
    size = (int(size), int(size)) if np.isscalar(size) else tuple(int(s) for s in size)
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise InvalidInput(f"expected HxWx3 RGB, got shape {arr.shape}")
    x = torch.from_numpy(arr / 255.0).permute(2, 0, 1)
    if tuple(x.shape[1:]) != size:
        x = F.interpolate(x[None], size=size, mode="bilinear", align_corners=False, antialias=True)[0]
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return ((x - mean) / std).numpy().astype(np.float32)


@dataclass
class AccessLog:
    """Records which tile ids were read, to audit test-set isolation."""

    seen: list[str] = field(default_factory=list)

    def record(self, tile_id: str):
        self.seen.append(tile_id)

    def touched(self, tile_ids: Iterable[str]) -> set[str]:
        return set(self.seen) & set(tile_ids)
