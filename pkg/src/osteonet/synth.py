"""Procedural H&E-like tiles for desk-scale experiments.

Class 0 tiles are smooth low-frequency colour fields, class 1 tiles carry a
few dark blob clusters on a pale ground (necrosis-like), and class 2 tiles a
dense texture of small dark dots (nuclei-like). Every patient gets its own
hue, stain strength and nucleus-size jitter so that generalizing to unseen
patients is not free.
"""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import CLASS_NAMES

logger = logging.getLogger(__name__)

# share of non-tumor / non-viable / viable tiles in the public collection (536/263/345)
TCIA_CLASS_COUNTS = (536, 263, 345)
DEFAULT_PROPORTIONS = tuple(c / sum(TCIA_CLASS_COUNTS) for c in TCIA_CLASS_COUNTS)

_BACKGROUND = np.array([238.0, 224.0, 232.0])
_EOSIN = np.array([222.0, 140.0, 182.0])
_HEMATOXYLIN = np.array([78.0, 44.0, 128.0])


def _patient_style(rng):
    return {
        "hue": rng.normal(0.0, 12.0, size=3),
        "stain": rng.uniform(0.8, 1.15),
        "scale": rng.uniform(0.8, 1.25),
        "density": rng.uniform(0.75, 1.3),
    }


def _smooth_field(rng, size, cells):
    coarse = rng.random((cells, cells))
    return ndimage.zoom(coarse, size / cells, order=3, mode="nearest")[:size, :size].clip(0, 1)


def _blend(base, color, alpha):
    return base * (1 - alpha[..., None]) + color * alpha[..., None]


def _tile(rng, label, size, style):
    eosin = _EOSIN + style["hue"]
    hema = _HEMATOXYLIN + style["hue"] * 0.5
    img = np.broadcast_to(_BACKGROUND + style["hue"] * 0.3, (size, size, 3)).copy()

    if label == 0:
        field = _smooth_field(rng, size, rng.integers(3, 6))
        img = _blend(img, eosin, 0.25 + 0.6 * field * style["stain"])
    elif label == 1:
        img = _blend(img, eosin, np.full((size, size), 0.15 * style["stain"]))
        canvas = np.zeros((size, size))
        for _ in range(rng.integers(2, 5)):
            cy, cx = rng.uniform(0.15, 0.85, size=2) * size
            for _ in range(rng.integers(3, 7)):
                y, x = rng.normal((cy, cx), size * 0.07)
                yy, xx = np.ogrid[:size, :size]
                r = size * rng.uniform(0.04, 0.08) * style["scale"]
                canvas += np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2 * r**2))
        img = _blend(img, hema * 0.8, np.clip(canvas, 0, 1) * 0.85 * style["stain"])
    else:
        img = _blend(img, eosin, np.full((size, size), 0.35 * style["stain"]))
        n_dots = int(rng.integers(90, 150) * style["density"] * (size / 64) ** 2)
        canvas = np.zeros((size, size))
        ys = rng.integers(0, size, n_dots)
        xs = rng.integers(0, size, n_dots)
        canvas[ys, xs] = 1.0
        canvas = ndimage.gaussian_filter(canvas, 0.9 * style["scale"]) * 6.0
        img = _blend(img, hema, np.clip(canvas, 0, 1) * 0.9 * style["stain"])

    img += rng.normal(0.0, 4.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _patient_class_counts(rng, n_tiles, proportions):
    p = rng.dirichlet(np.asarray(proportions) * 40.0)
    counts = rng.multinomial(n_tiles, p)
    for c in range(3):  # every patient holds every class
        while counts[c] == 0:
            counts[int(np.argmax(counts))] -= 1
            counts[c] += 1
    return counts


def synth_generate(
    out_dir,
    n_patients: int = 10,
    tiles_per_patient: int = 30,
    seed: int = 0,
    tile_size: int = 64,
    proportions=DEFAULT_PROPORTIONS,
) -> dict:
    """Write a synthetic collection in the layout ``ingest`` reads.

    Layout: ``<out>/synthetic/Case-<k>/Case-<k>_<i>.png`` plus
    ``annotations.csv`` (``image.name``, ``classification``) and
    ``metadata.json``. Returns the metadata.
    """
    if n_patients < 3:
        raise ValueError(f"need at least 3 patients for a patient-level split, got {n_patients}")
    if tiles_per_patient < 3:
        raise ValueError("need at least 3 tiles per patient so each holds every class")
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    rows = []
    totals = np.zeros(3, dtype=np.int64)

    for k in range(1, n_patients + 1):
        patient = f"Case-{k}"
        style = _patient_style(rng)
        counts = _patient_class_counts(rng, tiles_per_patient, proportions)
        labels = np.repeat(np.arange(3), counts)
        rng.shuffle(labels)
        folder = out / "synthetic" / patient
        folder.mkdir(parents=True, exist_ok=True)
        for i, label in enumerate(labels):
            name = f"{patient}_{i:04d}.png"
            Image.fromarray(_tile(rng, int(label), tile_size, style)).save(folder / name)
            rows.append((name, CLASS_NAMES[label]))
        totals += counts

    with open(out / "annotations.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image.name", "classification"])
        writer.writerows(rows)

    meta = {
        "seed": seed,
        "n_patients": n_patients,
        "tiles_per_patient": tiles_per_patient,
        "tile_size": tile_size,
        "proportions": [float(p) for p in proportions],
        "class_counts": totals.tolist(),
        "n_tiles": int(totals.sum()),
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    logger.info("wrote %d synthetic tiles for %d patients to %s", meta["n_tiles"], n_patients, out)
    return meta
