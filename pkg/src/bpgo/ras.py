"""Reliability-adaptive scaling: a smooth trust weight per prompt group."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidWeight

WEIGHT_FLOOR = 1e-3


@dataclass(frozen=True)
class RasParams:
    alpha: float = 0.5
    k: float = 1.0

    def __post_init__(self):
        if not self.alpha >= 0.0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not self.k > 0.0:
            raise ValueError(f"k must be > 0, got {self.k}")


def trust_weight(group_delta: float, params: RasParams = RasParams()) -> float:
    """w = 1 + alpha * (2 * sigmoid(k * delta) - 1).

    Uses the identity ``2*sigmoid(x) - 1 == tanh(x/2)``, which keeps the
    map exactly odd around delta = 0. For alpha >= 1 the weight is floored
    at ``WEIGHT_FLOOR`` so the group loss never flips sign.
    """
    if not math.isfinite(group_delta):
        raise ValueError(f"group_delta must be finite, got {group_delta}")
    w = 1.0 + params.alpha * math.tanh(0.5 * params.k * group_delta)
    if params.alpha >= 1.0:
        w = max(w, WEIGHT_FLOOR)
    return w


def ras_weighted_loss(base_loss: float, w: float) -> float:
    if not w > 0.0:
        raise InvalidWeight(f"trust weight must be positive, got {w}")
    return w * base_loss
