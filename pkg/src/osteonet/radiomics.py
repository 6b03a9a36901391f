"""Handcrafted radiomic descriptors for histology tiles.

Nineteen first-order intensity statistics over a foreground mask plus ten 2D
shape descriptors of that mask. Conventions (bin width 25 aligned at 0,
population moments, marching-squares mesh with diagonal pixels treated as
disconnected) follow the widely used PyRadiomics definitions so values are
directly comparable with it.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from skimage.filters import threshold_otsu

from .errors import EmptyMask, InvalidInput, NotFitted

BIN_WIDTH = 25.0
MIN_FOREGROUND_FRACTION = 0.01
STD_FLOOR = 1e-8
_ZERO_VARIANCE = 1e-12

FIRST_ORDER_NAMES = (
    "Energy",
    "TotalEnergy",
    "Entropy",
    "Minimum",
    "10Percentile",
    "90Percentile",
    "Maximum",
    "Mean",
    "Median",
    "InterquartileRange",
    "Range",
    "MeanAbsoluteDeviation",
    "RobustMeanAbsoluteDeviation",
    "RootMeanSquared",
    "StandardDeviation",
    "Skewness",
    "Kurtosis",
    "Variance",
    "Uniformity",
)

SHAPE2D_NAMES = (
    "MeshSurface",
    "PixelSurface",
    "Perimeter",
    "PerimeterSurfaceRatio",
    "Sphericity",
    "SphericalDisproportion",
    "MaximumDiameter",
    "MajorAxisLength",
    "MinorAxisLength",
    "Elongation",
)

FEATURE_NAMES = tuple(f"firstorder_{n}" for n in FIRST_ORDER_NAMES) + tuple(
    f"shape2D_{n}" for n in SHAPE2D_NAMES
)
N_FEATURES = len(FEATURE_NAMES)  # 29


@dataclass(frozen=True)
class RadiomicFeatureVector:
    values: np.ndarray
    feature_names: tuple[str, ...] = FEATURE_NAMES

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (N_FEATURES,):
            raise InvalidInput(f"expected {N_FEATURES} features, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            bad = [n for n, v in zip(self.feature_names, values) if not np.isfinite(v)]
            raise InvalidInput(f"non-finite radiomic features: {bad}")
        object.__setattr__(self, "values", values)

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.feature_names, self.values)}


def to_grayscale(tile) -> np.ndarray:
    """Rec. 601 luminance of an RGB tile, as float64 in [0, 255]."""
    rgb = np.asarray(tile)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise InvalidInput(f"expected an HxWx3 RGB array, got shape {rgb.shape}")
    if rgb.shape[0] == 0 or rgb.shape[1] == 0:
        raise InvalidInput("tile has zero height or width")
    rgb = rgb.astype(np.float64)
    if not np.all(np.isfinite(rgb)):
        raise InvalidInput("tile contains non-finite values")
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def compute_mask(gray: np.ndarray) -> np.ndarray:
    """Otsu foreground mask; tissue is darker than the slide background.

    Falls back to the all-true mask when fewer than 1% of pixels survive.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or gray.size == 0:
        raise InvalidInput(f"expected a non-empty 2D array, got shape {gray.shape}")
    if np.all(gray == gray.flat[0]):
        return np.ones(gray.shape, dtype=bool)
    mask = gray <= threshold_otsu(gray, nbins=256)
    if mask.sum() < MIN_FOREGROUND_FRACTION * mask.size:
        return np.ones(gray.shape, dtype=bool)
    return mask


def _masked_values(gray, mask):
    gray = np.asarray(gray, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if gray.shape != mask.shape:
        raise InvalidInput(f"mask shape {mask.shape} does not match tile shape {gray.shape}")
    if not mask.any():
        raise EmptyMask("foreground mask has no pixels")
    return gray[mask]


def first_order_features(gray: np.ndarray, mask: np.ndarray, spacing: float = 1.0) -> dict[str, float]:
    x = _masked_values(gray, mask)
    n = x.size

    mean = x.mean()
    dev = x - mean
    m2 = np.mean(dev**2)
    if m2 < _ZERO_VARIANCE:
        skewness = kurtosis = 0.0
    else:
        skewness = np.mean(dev**3) / m2**1.5
        kurtosis = np.mean(dev**4) / m2**2

    # bins are [k*W, (k+1)*W) for integer k
    bins = np.floor(x / BIN_WIDTH).astype(np.int64)
    _, counts = np.unique(bins, return_counts=True)
    p = counts / n
    entropy = float(-np.sum(p * np.log2(p)))

    p10, p25, p50, p75, p90 = np.percentile(x, [10, 25, 50, 75, 90])
    robust = x[(x >= p10) & (x <= p90)]
    energy = float(np.sum(x**2))

    return {
        "Energy": energy,
        "TotalEnergy": spacing**2 * energy,
        "Entropy": entropy,
        "Minimum": float(x.min()),
        "10Percentile": float(p10),
        "90Percentile": float(p90),
        "Maximum": float(x.max()),
        "Mean": float(mean),
        "Median": float(p50),
        "InterquartileRange": float(p75 - p25),
        "Range": float(x.max() - x.min()),
        "MeanAbsoluteDeviation": float(np.mean(np.abs(dev))),
        # an empty 10-90 band (very small masks) has no spread to measure
        "RobustMeanAbsoluteDeviation": float(np.mean(np.abs(robust - robust.mean()))) if robust.size else 0.0,
        "RootMeanSquared": math.sqrt(energy / n),
        "StandardDeviation": math.sqrt(m2),
        "Skewness": float(skewness),
        "Kurtosis": float(kurtosis),
        "Variance": float(m2),
        "Uniformity": float(np.sum(p**2)),
    }


def _mesh_area_perimeter(padded: np.ndarray, sy: float, sx: float) -> tuple[float, float]:
    # Each 2x2 window of pixel centres contributes the part of its square that
    # lies inside the midpoint polygon; diagonal pairs are kept separate.
    p0 = padded[:-1, :-1]
    p1 = padded[:-1, 1:]
    p2 = padded[1:, 1:]
    p3 = padded[1:, :-1]
    case = (p0.astype(np.uint8) | (p1 << 1) | (p2 << 2) | (p3 << 3)).ravel()
    counts = np.bincount(case, minlength=16)

    cut = math.hypot(sy, sx) / 2.0
    area_frac = np.zeros(16)
    length = np.zeros(16)
    for idx in range(1, 15):
        k = bin(idx).count("1")
        if k == 1:
            area_frac[idx], length[idx] = 1 / 8, cut
        elif k == 3:
            area_frac[idx], length[idx] = 7 / 8, cut
        elif idx in (5, 10):
            area_frac[idx], length[idx] = 1 / 4, 2 * cut
        elif idx in (3, 12):  # full top or bottom row: horizontal segment
            area_frac[idx], length[idx] = 1 / 2, sx
        else:  # 6, 9: full left or right column
            area_frac[idx], length[idx] = 1 / 2, sy
    area_frac[15] = 1.0
    return float(counts @ area_frac) * sy * sx, float(counts @ length)


def _boundary_vertices(padded: np.ndarray, sy: float, sx: float) -> np.ndarray:
    hy, hx = np.nonzero(padded[:, :-1] != padded[:, 1:])
    vy, vx = np.nonzero(padded[:-1, :] != padded[1:, :])
    ys = np.concatenate([hy, vy + 0.5]) * sy
    xs = np.concatenate([hx + 0.5, vx]) * sx
    return np.column_stack([ys, xs])


def _max_pairwise_distance(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    try:
        points = points[ConvexHull(points).vertices]
    except QhullError:
        pass  # collinear or too few points; brute force below
    diff = points[:, None, :] - points[None, :, :]
    return float(np.sqrt(np.max(np.sum(diff**2, axis=-1))))


def shape2d_features(mask: np.ndarray, spacing: float = 1.0) -> dict[str, float]:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise InvalidInput(f"expected a 2D mask, got shape {mask.shape}")
    if not mask.any():
        raise EmptyMask("foreground mask has no pixels")
    sy = sx = float(spacing)

    padded = np.pad(mask, 1).astype(np.uint8)
    area, perimeter = _mesh_area_perimeter(padded, sy, sx)
    diameter = _max_pairwise_distance(_boundary_vertices(padded, sy, sx))

    coords = np.argwhere(mask).astype(np.float64) * np.array([sy, sx])
    n_pixels = len(coords)
    centred = coords - coords.mean(axis=0)
    cov = centred.T @ centred / n_pixels
    minor_ev, major_ev = np.clip(np.linalg.eigvalsh(cov), 0.0, None)
    if major_ev <= 0:
        elongation = 1.0  # single pixel: no preferred axis
    else:
        elongation = math.sqrt(minor_ev / major_ev)

    sphericity = 2.0 * math.sqrt(math.pi * area) / perimeter
    return {
        "MeshSurface": area,
        "PixelSurface": n_pixels * sy * sx,
        "Perimeter": perimeter,
        "PerimeterSurfaceRatio": perimeter / area,
        "Sphericity": sphericity,
        "SphericalDisproportion": 1.0 / sphericity,
        "MaximumDiameter": diameter,
        "MajorAxisLength": 4.0 * math.sqrt(major_ev),
        "MinorAxisLength": 4.0 * math.sqrt(minor_ev),
        "Elongation": elongation,
    }


def extract_from_gray(gray: np.ndarray, mask: np.ndarray, spacing: float = 1.0) -> RadiomicFeatureVector:
    fo = first_order_features(gray, mask, spacing)
    sh = shape2d_features(mask, spacing)
    values = [fo[n] for n in FIRST_ORDER_NAMES] + [sh[n] for n in SHAPE2D_NAMES]
    return RadiomicFeatureVector(np.array(values, dtype=np.float64))


def extract(tile) -> RadiomicFeatureVector:
    """Full 29-feature vector of an RGB tile (grayscale, Otsu mask, features)."""
    gray = to_grayscale(tile)
    return extract_from_gray(gray, compute_mask(gray))


@dataclass
class FeatureStandardizer:
    """Per-feature z-scoring with statistics from the training split only."""

    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    feature_names: tuple[str, ...] = FEATURE_NAMES
    source_hash: str = ""
    fitted: bool = field(default=False)

    @classmethod
    def fit(cls, train_vectors, source_ids: Iterable[str] = ()) -> "FeatureStandardizer":
        X = _as_matrix(train_vectors)
        if X.shape[0] < 2:
            raise InvalidInput("need at least 2 training vectors to fit a standardizer")
        std = np.maximum(X.std(axis=0), STD_FLOOR)
        digest = hashlib.sha256("\n".join(sorted(source_ids)).encode()).hexdigest()
        return cls(mean=X.mean(axis=0), std=std, source_hash=digest, fitted=True)

    def apply(self, vectors) -> np.ndarray:
        if not self.fitted:
            raise NotFitted("standardizer must be fit on training data before use")
        single = isinstance(vectors, RadiomicFeatureVector) or np.ndim(vectors) == 1
        X = _as_matrix([vectors] if single else vectors)
        out = (X - self.mean) / self.std
        return out[0] if single else out

    def state_dict(self) -> dict:
        if not self.fitted:
            raise NotFitted("cannot serialize an unfitted standardizer")
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "feature_names": list(self.feature_names),
            "source_hash": self.source_hash,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "FeatureStandardizer":
        return cls(
            mean=np.asarray(state["mean"], dtype=np.float64),
            std=np.asarray(state["std"], dtype=np.float64),
            feature_names=tuple(state["feature_names"]),
            source_hash=state.get("source_hash", ""),
            fitted=True,
        )


def apply(standardizer: FeatureStandardizer, vectors) -> np.ndarray:
    return standardizer.apply(vectors)


def fit_standardizer(train_vectors, source_ids: Iterable[str] = ()) -> FeatureStandardizer:
    return FeatureStandardizer.fit(train_vectors, source_ids)


def _as_matrix(vectors) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        X = np.atleast_2d(vectors).astype(np.float64)
    else:
        X = np.array(
            [v.values if isinstance(v, RadiomicFeatureVector) else v for v in vectors],
            dtype=np.float64,
        )
    if X.ndim != 2 or X.shape[1] != N_FEATURES:
        raise InvalidInput(f"expected (n, {N_FEATURES}) feature matrix, got {X.shape}")
    return X


# -- feature cache -----------------------------------------------------------

CACHE_META_COLUMNS = ("tile_id", "patient_id", "label")


def write_feature_cache(path, rows: Sequence[tuple[str, str, int, RadiomicFeatureVector]]) -> Path:
    """Write ``(tile_id, patient_id, label, vector)`` rows sorted by tile id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CACHE_META_COLUMNS + FEATURE_NAMES)
        for tile_id, patient_id, label, vec in sorted(rows, key=lambda r: r[0]):
            writer.writerow([tile_id, patient_id, int(label)] + [repr(float(v)) for v in vec.values])
    return path


def read_feature_cache(path) -> dict[str, dict]:
    """Load a feature cache as ``{tile_id: {"patient_id", "label", "values"}}``."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CACHE_META_COLUMNS + FEATURE_NAMES:
            raise InvalidInput(f"{path}: unexpected feature cache header")
        for row in reader:
            out[row[0]] = {
                "patient_id": row[1],
                "label": int(row[2]),
                "values": np.array([float(v) for v in row[3:]], dtype=np.float64),
            }
    return out
