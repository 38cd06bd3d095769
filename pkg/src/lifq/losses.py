"""Training objective pieces and rank/linear correlation metrics.

The objective combines an L1 regression term with two router regularizers:
a load-balancing term that couples each expert's routed-token fraction with
its mean dense probability, and a z-term that penalizes the squared
log-sum-exp of the gate logits. Metrics are the field-standard Spearman and
Pearson correlations, with average ranks for ties.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import MetricError
from .moe import RoutingRecord
from .tensor import Tensor, absolute, as_tensor, logsumexp_lastdim


@dataclass
class LossWeights:
    lambda_aux: float = 0.01
    lambda_z: float = 0.001

    def __post_init__(self):
        if self.lambda_aux < 0 or self.lambda_z < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    main: float
    aux: float
    z: float
    total: float


def l1_main(pred: Sequence[Tensor] | Tensor, target: np.ndarray) -> Tensor:
    """Mean absolute regression error over a batch of scalar predictions."""
    target = np.asarray(target, dtype=np.float64)
    if target.size == 0:
        raise ValueError("l1_main needs a non-empty batch")
    if isinstance(pred, Tensor):
        if pred.size != target.size:
            raise ValueError(
                f"prediction count {pred.size} != target count {target.size}")
        return absolute(pred - Tensor(target.reshape(pred.shape))).mean()
    if len(pred) != target.size:
        raise ValueError(f"prediction count {len(pred)} != target count {target.size}")
    total = None
    for p, y in zip(pred, target):
        term = absolute(as_tensor(p) - float(y))
        total = term if total is None else total + term
    return total * (1.0 / target.size)


def load_balance_loss(routing: RoutingRecord) -> Tensor:
    """Couple routed-token fractions with mean dense probabilities.

    With perfectly uniform statistics over E experts this evaluates to
    exactly top_k; concentrating all tokens and probability mass on a single
    expert drives it toward E. The mask is a constant here, so gradients
    reach the gate only through the dense probabilities.
    """
    num_experts = routing.mask.shape[1]
    token_fraction = Tensor(routing.mask.mean(axis=0))
    mean_prob = routing.probs.mean(axis=0)
    return (token_fraction * mean_prob).sum() * float(num_experts)


def z_loss(logits: Tensor) -> Tensor:
    """Mean squared log-sum-exp of each token's (pre-masking) gate logits."""
    return (logsumexp_lastdim(logits) ** 2.0).mean()


def weighted_total(main: Tensor, aux: Tensor, z: Tensor,
                   weights: LossWeights) -> Tensor:
    """Differentiable combination used for backpropagation."""
    return main + weights.lambda_aux * aux + weights.lambda_z * z


def total_loss(main: float, aux: float, z: float,
               weights: LossWeights) -> LossBreakdown:
    """Reported breakdown; total is the exact weighted sum of the parts."""
    total = main + weights.lambda_aux * aux + weights.lambda_z * z
    return LossBreakdown(main=main, aux=aux, z=z, total=total)


# -- correlation metrics --------------------------------------------------------


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank range."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def plcc(pred: np.ndarray, target: np.ndarray) -> float:
    """Pearson linear correlation in [-1, 1]."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 1 or pred.size < 2:
        raise ValueError(
            f"plcc needs two equal-length vectors of >= 2 entries, "
            f"got {pred.shape} and {target.shape}")
    px = pred - pred.mean()
    tx = target - target.mean()
    denom = np.sqrt((px * px).sum() * (tx * tx).sum())
    if denom == 0.0:
        raise MetricError("correlation undefined: an input has zero variance")
    return float((px * tx).sum() / denom)


def srocc(pred: np.ndarray, target: np.ndarray) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 1 or pred.size < 2:
        raise ValueError(
            f"srocc needs two equal-length vectors of >= 2 entries, "
            f"got {pred.shape} and {target.shape}")
    try:
        return plcc(_average_ranks(pred), _average_ranks(target))
    except MetricError:
        raise MetricError("rank correlation undefined: constant input ranks")
