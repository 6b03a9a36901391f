"""Class-weighted head losses and the uncertainty-weighted two-task objective.

The joint objective is

    L = exp(-lambda_a) * mean_L_a + exp(-lambda_b) * mean_L_b + eta * (lambda_a + lambda_b)

with ``lambda = log sigma^2`` learned per task. The weighted cross-entropies
act on the head probabilities directly; the composed three-way distribution
is only used at inference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, DegenerateClassCounts

PROB_FLOOR = 1e-12
DEFAULT_ETA = 0.2


def inverse_count_weights(counts) -> np.ndarray:
    """1/n_c rescaled to unit mean."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise DegenerateClassCounts(f"every class needs at least one training sample, got counts {counts.tolist()}")
    w = 1.0 / counts
    return w / w.mean()


@dataclass(frozen=True)
class ClassWeights:
    beta_a: np.ndarray
    beta_b: np.ndarray

    def digest(self) -> str:
        return np.concatenate([self.beta_a, self.beta_b]).tobytes().hex()


def compute_class_weights(train_labels) -> ClassWeights:
    """Per-head weights from three-class training labels.

    Coarse head counts non-tumor vs. tumor over all tiles; fine head counts
    non-viable vs. viable over tumor tiles only.
    """
    n = np.bincount(np.asarray(train_labels, dtype=np.int64), minlength=3)
    try:
        beta_a = inverse_count_weights([n[0], n[1] + n[2]])
        beta_b = inverse_count_weights([n[1], n[2]])
    except DegenerateClassCounts as exc:
        raise DegenerateClassCounts(f"training label counts {n.tolist()}: {exc}") from None
    return ClassWeights(beta_a, beta_b)


def flat_class_weights(train_labels) -> np.ndarray:
    return inverse_count_weights(np.bincount(np.asarray(train_labels, dtype=np.int64), minlength=3))


def _weighted_nll(probs, targets, weights):
    picked = probs.gather(1, targets.long().view(-1, 1)).squeeze(1).clamp_min(PROB_FLOOR)
    w = torch.as_tensor(weights, dtype=probs.dtype, device=probs.device)[targets.long()]
    return -w * torch.log(picked)


def loss_a(p_a, y_a, beta_a):
    """Mean class-weighted cross-entropy of the coarse head over the batch."""
    return _weighted_nll(p_a, y_a, beta_a).mean()


def loss_b(p_b, y_b, beta_b, tumor_mask):
    """Mean class-weighted cross-entropy of the fine head over tumor rows only.

    A batch with no tumor rows contributes a constant 0, so the fine head gets
    no gradient from it.
    """
    tumor_mask = tumor_mask.bool()
    if not tumor_mask.any():
        return p_b.new_zeros(())
    return _weighted_nll(p_b[tumor_mask], y_b[tumor_mask], beta_b).mean()


def flat3_loss(p3, y, class_weights3):
    return _weighted_nll(p3, y, class_weights3).mean()


def joint_loss(mean_loss_a, mean_loss_b, lambda_a, lambda_b, eta=DEFAULT_ETA):
    if isinstance(lambda_a, torch.Tensor) or isinstance(mean_loss_a, torch.Tensor):
        exp = torch.exp
        lambda_a = torch.as_tensor(lambda_a)
        lambda_b = torch.as_tensor(lambda_b)
    else:
        exp = math.exp
    return exp(-lambda_a) * mean_loss_a + exp(-lambda_b) * mean_loss_b + eta * (lambda_a + lambda_b)


def lambda_gradient(mean_loss, lam, eta=DEFAULT_ETA) -> float:
    """Closed-form d(joint)/d(lambda) for one task: -exp(-lambda) * L + eta."""
    return -math.exp(-lam) * mean_loss + eta


def stationary_lambda(mean_loss, eta=DEFAULT_ETA) -> float:
    """Where the lambda gradient vanishes: exp(-lambda) = eta / L."""
    return math.log(mean_loss / eta)


class UncertaintyWeighting(nn.Module):
    """Learnable log-variances for the two tasks, initialised at 0 (sigma^2 = 1).

    With ``learnable=False`` the two losses are simply summed: the lambdas are
    frozen at 0 and the regulariser is dropped.
    """

    def __init__(self, eta: float = DEFAULT_ETA, learnable: bool = True):
        super().__init__()
        if eta <= 0:
            raise ConfigError(f"eta must be positive, got {eta}")
        self.eta = float(eta)
        self.learnable = learnable
        if learnable:
            self.lambda_a = nn.Parameter(torch.zeros(()))
            self.lambda_b = nn.Parameter(torch.zeros(()))
        else:
            self.register_buffer("lambda_a", torch.zeros(()))
            self.register_buffer("lambda_b", torch.zeros(()))

    def forward(self, mean_loss_a, mean_loss_b):
        if not self.learnable:
            return mean_loss_a + mean_loss_b
        return joint_loss(mean_loss_a, mean_loss_b, self.lambda_a, self.lambda_b, self.eta)


@dataclass
class LossComponents:
    total: torch.Tensor
    loss_a: float
    loss_b: float
    lambda_a: float
    lambda_b: float


class HierarchicalObjective(nn.Module):
    """Training objective for either head type.

    ``hierarchical`` heads use the per-head weighted losses combined through
    :class:`UncertaintyWeighting` (learnable when ``uncertainty`` is set);
    ``flat`` heads use a class-weighted three-way cross-entropy.
    """

    def __init__(self, head: str, labels, eta: float = DEFAULT_ETA, uncertainty: bool = True):
        super().__init__()
        self.head = head
        if head == "hierarchical":
            cw = compute_class_weights(labels)
            self.register_buffer("beta_a", torch.as_tensor(cw.beta_a))
            self.register_buffer("beta_b", torch.as_tensor(cw.beta_b))
            self.weighting = UncertaintyWeighting(eta, learnable=uncertainty)
        elif head == "flat":
            self.register_buffer("beta3", torch.as_tensor(flat_class_weights(labels)))
        else:
            raise ConfigError(f"unknown head type {head!r}")

    def class_weight_digest(self) -> str:
        bufs = [self.beta_a, self.beta_b] if self.head == "hierarchical" else [self.beta3]
        return torch.cat(bufs).double().numpy().tobytes().hex()

    def forward(self, out, y) -> LossComponents:
        if self.head == "flat":
            total = flat3_loss(out.dist3, y, self.beta3.to(out.dist3.dtype))
            return LossComponents(total, float(total.detach()), 0.0, 0.0, 0.0)
        y_a = (y != 0).long()
        tumor = y != 0
        y_b = (y - 1).clamp_min(0)
        la = loss_a(out.p_a, y_a, self.beta_a.to(out.p_a.dtype))
        lb = loss_b(out.p_b, y_b, self.beta_b.to(out.p_b.dtype), tumor)
        total = self.weighting(la, lb)
        return LossComponents(
            total,
            float(la.detach()),
            float(lb.detach()),
            float(self.weighting.lambda_a.detach()),
            float(self.weighting.lambda_b.detach()),
        )
