"""Tile-level evaluation: accuracy, F1, one-vs-rest AUC and operating-point metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import CLASS_ABBREV
from .errors import UndefinedMetric

# constraint checks like "specificity >= 0.90" tolerate float round-off, e.g. 27/30
FLOOR_TOL = 1e-12
OVERALL_KEYS = ("accuracy", "f1_macro", "f1_weighted", "auc_ovr")
PER_CLASS_KEYS = ("sen_at_spe90", "spe_at_sen90", "f1", "auc")


@dataclass(frozen=True)
class EvalRecord:
    tile_id: str
    true_label: int
    dist3: tuple[float, float, float]
    predicted: int


def _binary_inputs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.shape} vs {labels.shape}")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise UndefinedMetric("metric needs both positive and negative samples")
    return scores, labels, n_pos, labels.size - n_pos


def auc_binary(scores, labels) -> float:
    """Mann-Whitney AUC: P(random positive outscores random negative), ties count 1/2."""
    scores, labels, n_pos, n_neg = _binary_inputs(scores, labels)
    ranks = stats.rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _operating_points(scores, labels):
    """(TP, FP) for every distinct decision 'score > t', from t = max down to t = -inf."""
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.r_[0, np.cumsum(l)[last_of_group]]
    fp = np.r_[0, np.cumsum(~l)[last_of_group]]
    return tp, fp


def sen_at_spe(scores, labels, spe_floor: float = 0.90) -> float:
    """Highest sensitivity over thresholds whose specificity is at least ``spe_floor``."""
    scores, labels, n_pos, n_neg = _binary_inputs(scores, labels)
    tp, fp = _operating_points(scores, labels)
    ok = (n_neg - fp) / n_neg >= spe_floor - FLOOR_TOL
    return float(np.max(tp[ok]) / n_pos)


def spe_at_sen(scores, labels, sen_floor: float = 0.90) -> float:
    """Highest specificity over thresholds whose sensitivity is at least ``sen_floor``."""
    scores, labels, n_pos, n_neg = _binary_inputs(scores, labels)
    tp, fp = _operating_points(scores, labels)
    ok = tp / n_pos >= sen_floor - FLOOR_TOL
    return float(np.max(n_neg - fp[ok]) / n_neg)


def confusion_matrix(y_true, y_pred, n_classes: int = 3) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    return np.bincount(y_true * n_classes + y_pred, minlength=n_classes**2).reshape(n_classes, n_classes)


def f1_scores(y_true, y_pred, n_classes: int = 3):
    """Returns ``(macro, weighted, per_class)``; a class with P + R = 0 scores 0."""
    cm = confusion_matrix(y_true, y_pred, n_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # (TP+FP) + (TP+FN)
    per_class = np.divide(2 * tp, denom, out=np.zeros(n_classes), where=denom > 0)
    support = cm.sum(axis=1)
    weighted = float(per_class @ support / support.sum())
    return float(per_class.mean()), weighted, per_class


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    if y_true.size == 0:
        raise UndefinedMetric("accuracy of an empty set")
    return float(np.mean(y_true == np.asarray(y_pred)))


def ovr_auc_per_class(y_true, dist3) -> list[float]:
    y_true = np.asarray(y_true)
    dist3 = np.asarray(dist3, dtype=np.float64)
    missing = [c for c in range(dist3.shape[1]) if not np.any(y_true == c)]
    if missing:
        raise UndefinedMetric(f"one-vs-rest AUC needs every class present; missing {missing}")
    return [auc_binary(dist3[:, c], y_true == c) for c in range(dist3.shape[1])]


def ovr_macro_auc(y_true, dist3) -> float:
    return float(np.mean(ovr_auc_per_class(y_true, dist3)))


@dataclass
class MetricTable:
    overall: dict[str, float]
    per_class: list[dict[str, float]]

    def to_dict(self) -> dict:
        return {"overall": dict(self.overall), "per_class": [dict(p) for p in self.per_class]}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricTable":
        return cls(dict(d["overall"]), [dict(p) for p in d["per_class"]])

    def flat(self) -> dict[str, float]:
        out = {f"overall.{k}": v for k, v in self.overall.items()}
        for c, row in enumerate(self.per_class):
            out.update({f"{CLASS_ABBREV[c]}.{k}": v for k, v in row.items() if k in PER_CLASS_KEYS})
        return out


def records_from_predictions(tile_ids, y_true, dist3) -> list[EvalRecord]:
    dist3 = np.asarray(dist3, dtype=np.float64)
    pred = np.argmax(dist3, axis=1)
    return [
        EvalRecord(str(t), int(y), tuple(float(v) for v in d), int(p))
        for t, y, d, p in zip(tile_ids, y_true, dist3, pred)
    ]


def metric_table(y_true, dist3) -> MetricTable:
    """Every overall and per-class quantity from labels and three-way scores."""
    y_true = np.asarray(y_true, dtype=np.int64)
    dist3 = np.asarray(dist3, dtype=np.float64)
    y_pred = np.argmax(dist3, axis=1)
    macro, weighted, f1c = f1_scores(y_true, y_pred)
    aucs = ovr_auc_per_class(y_true, dist3)
    per_class = []
    for c in range(3):
        positive = y_true == c
        per_class.append({
            "class": CLASS_ABBREV[c],
            "sen_at_spe90": sen_at_spe(dist3[:, c], positive, 0.90),
            "spe_at_sen90": spe_at_sen(dist3[:, c], positive, 0.90),
            "f1": float(f1c[c]),
            "auc": aucs[c],
        })
    overall = {
        "accuracy": accuracy(y_true, y_pred),
        "f1_macro": macro,
        "f1_weighted": weighted,
        "auc_ovr": float(np.mean(aucs)),
    }
    return MetricTable(overall, per_class)


def table_from_records(records: Sequence[EvalRecord]) -> MetricTable:
    return metric_table([r.true_label for r in records], [r.dist3 for r in records])


# -- multi-run aggregation and testing ---------------------------------------


def format_pm(mean: float, std: float, digits: int = 2) -> str:
    return f"{mean:.{digits}f}±{std:.{digits}f}"


@dataclass
class RunAggregate:
    mean: dict[str, float]
    std: dict[str, float]
    n_runs: int
    values: dict[str, list[float]] = field(default_factory=dict)

    def formatted(self, key: str, digits: int = 2) -> str:
        return format_pm(self.mean[key], self.std[key], digits)

    def to_dict(self) -> dict:
        return {"n_runs": self.n_runs, "mean": self.mean, "std": self.std, "values": self.values}


def aggregate_runs(tables: Sequence[MetricTable]) -> RunAggregate:
    """Per-metric mean and sample standard deviation (n - 1 divisor)."""
    if len(tables) < 2:
        raise ValueError("aggregation needs at least 2 runs")
    flats = [t.flat() for t in tables]
    keys = list(flats[0])
    values = {k: [f[k] for f in flats] for k in keys}
    mean = {k: float(np.mean(v)) for k, v in values.items()}
    std = {k: float(np.std(v, ddof=1)) for k, v in values.items()}
    return RunAggregate(mean, std, len(tables), values)


def significance(runs_a, runs_b) -> float:
    """Two-sided Welch t-test p-value on run-level metric values.

    Degenerate arms with zero variance give p = 1 for equal means, otherwise
    the smallest positive double so that p stays in (0, 1].
    """
    a = np.asarray(runs_a, dtype=np.float64)
    b = np.asarray(runs_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each arm needs at least 2 runs")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        return 1.0 if diff == 0.0 else float(np.finfo(np.float64).tiny)
    t = abs(diff) / math.sqrt(se2)
    # Welch-Satterthwaite, written in variance shares so tiny variances cannot underflow
    fa, fb = va / se2, vb / se2
    dof = 1.0 / (fa**2 / (a.size - 1) + fb**2 / (b.size - 1))
    p = 2.0 * stats.t.sf(t, dof)
    return float(min(1.0, max(p, np.finfo(np.float64).tiny)))


# -- report formatting -------------------------------------------------------

METRICS_SCHEMA = {
    "type": "object",
    "required": ["overall", "per_class", "runs", "config_hash"],
    "properties": {
        "overall": {
            "type": "object",
            "required": list(OVERALL_KEYS),
            "properties": {k: {"type": "number", "minimum": 0, "maximum": 1} for k in OVERALL_KEYS},
        },
        "per_class": {
            "type": "array",
            "minItems": 3,
            "maxItems": 3,
            "items": {
                "type": "object",
                "required": ["class", *PER_CLASS_KEYS],
                "properties": {
                    "class": {"type": "string"},
                    **{k: {"type": "number", "minimum": 0, "maximum": 1} for k in PER_CLASS_KEYS},
                },
            },
        },
        "runs": {"type": "integer", "minimum": 1},
        "config_hash": {"type": "string"},
    },
}


def format_table1(rows) -> str:
    """``rows``: (name, h_loss, radiomics, RunAggregate) tuples."""
    head = f"{'Backbone':<22}{'H-loss':>7}{'Rad.':>6}  {'Acc.':>10}{'F1 macro':>11}{'F1 weighted':>13}{'AUC ovr':>11}"
    lines = [head, "-" * len(head)]
    for name, hloss, rad, agg in rows:
        if agg is None:
            lines.append(f"{name:<22}{_mark(hloss):>7}{_mark(rad):>6}  (incomplete)")
            continue
        cells = [agg.formatted(f"overall.{k}") for k in OVERALL_KEYS]
        lines.append(f"{name:<22}{_mark(hloss):>7}{_mark(rad):>6}  {cells[0]:>10}{cells[1]:>11}{cells[2]:>13}{cells[3]:>11}")
    return "\n".join(lines)


def format_table2(rows) -> str:
    head = f"{'Backbone':<22}{'H-loss':>7}{'Rad':>5} {'type':<5}{'Sen@Spe90':>11}{'Spe@Sen90':>11}{'F1':>11}{'AUC':>11}"
    lines = [head, "-" * len(head)]
    for name, hloss, rad, agg in rows:
        for c, abbrev in enumerate(CLASS_ABBREV):
            label = name if c == 0 else ""
            marks = (_mark(hloss), _mark(rad)) if c == 0 else ("", "")
            if agg is None:
                lines.append(f"{label:<22}{marks[0]:>7}{marks[1]:>5} {abbrev:<5}(incomplete)")
                continue
            cells = [agg.formatted(f"{abbrev}.{k}") for k in PER_CLASS_KEYS]
            lines.append(f"{label:<22}{marks[0]:>7}{marks[1]:>5} {abbrev:<5}" + "".join(f"{c:>11}" for c in cells))
    return "\n".join(lines)


def _mark(flag: bool) -> str:
    return "yes" if flag else "no"
