"""Shared oracles: brute-force metric definitions and a tiny differentiable model."""
import itertools
from fractions import Fraction

import numpy as np
import torch

from osteonet.model import ModelConfig, MultimodalNet
from osteonet.objective import HierarchicalObjective

# -- metrics by exhaustive enumeration ----------------------------------------


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def _rates(scores, labels, t):
    pred = [s > t for s in scores]
    tp = sum(p and l for p, l in zip(pred, labels))
    tn = sum((not p) and (not l) for p, l in zip(pred, labels))
    n_pos = sum(labels)
    return tp / n_pos, tn / (len(labels) - n_pos)


def _thresholds(scores):
    # every distinct decision "score > t": at each score plus one below the minimum
    return sorted(set(scores)) + [min(scores) - 1.0]


def brute_sen_at_spe(scores, labels, floor=0.90):
    pts = [_rates(scores, labels, t) for t in _thresholds(scores)]
    return max(sen for sen, spe in pts if spe >= floor - 1e-12)


def brute_spe_at_sen(scores, labels, floor=0.90):
    pts = [_rates(scores, labels, t) for t in _thresholds(scores)]
    return max(spe for sen, spe in pts if sen >= floor - 1e-12)


def brute_f1(y_true, y_pred, n_classes=3):
    """Per-class F1 from precision and recall in exact rational arithmetic."""
    per_class = []
    for c in range(n_classes):
        tp = sum(t == c and p == c for t, p in zip(y_true, y_pred))
        fp = sum(t != c and p == c for t, p in zip(y_true, y_pred))
        fn = sum(t == c and p != c for t, p in zip(y_true, y_pred))
        prec = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        rec = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        per_class.append(float(2 * prec * rec / (prec + rec)) if prec + rec else 0.0)
    return per_class


def random_binary_instance(rng):
    n = int(rng.integers(2, 51))
    labels = rng.random(n) < rng.uniform(0.2, 0.8)
    labels[0], labels[1] = True, False
    # coarse grid forces ties
    scores = rng.integers(0, int(rng.integers(2, 20)), n) / 10.0
    return scores, labels


# -- a d=4 toy model for gradient checks --------------------------------------

TOY_INPUT = (2, 2)


def toy_model(seed, d=4):
    torch.manual_seed(seed)
    cfg = ModelConfig(backbone="linear", embed_dim=d, pretrained=False, rad_hidden=d, gate_hidden=d,
                      input_size=TOY_INPUT)
    return MultimodalNet(cfg).double()


def toy_batch(rng, n=8):
    y = torch.as_tensor(np.r_[0, 1, 2, rng.integers(0, 3, n - 3)])
    x = torch.as_tensor(rng.normal(size=(n, 3, *TOY_INPUT)))
    r = torch.as_tensor(rng.normal(size=(n, 29)))
    return x, r, y


def gradient_check(seed, eps=1e-6):
    """Largest relative gap between autograd and central differences at one random point."""
    rng = np.random.default_rng(seed)
    model = toy_model(seed)
    objective = HierarchicalObjective("hierarchical", [0] * 5 + [1] * 3 + [2] * 4).double()
    with torch.no_grad():
        objective.weighting.lambda_a.fill_(rng.normal())
        objective.weighting.lambda_b.fill_(rng.normal())
    x, r, y = toy_batch(rng)
    params = list(model.parameters()) + list(objective.parameters())

    def total():
        return objective(model(x, r), y).total

    model.zero_grad()
    objective.zero_grad()
    total().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).numpy().copy()

    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = total().item()
                flat[i] = orig - eps
                down = total().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * eps))
    numeric = np.array(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / scale)), len(numeric)
