"""Contrastive reward transformation around the semantic prior."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grpo import TrajectoryGroup, compute_advantages, grpo_group_loss, grpo_group_loss_and_gradient


@dataclass(frozen=True)
class CrtParams:
    lam: float = 1.0
    reward_clamp: tuple = (-10.0, 10.0)

    def __post_init__(self):
        if not self.lam > 0.0:
            raise ValueError(f"contrast factor must be > 0, got {self.lam}")
        lo, hi = self.reward_clamp
        if not lo < hi:
            raise ValueError(f"reward_clamp must satisfy lo < hi, got {self.reward_clamp}")
        object.__setattr__(self, "reward_clamp", (float(lo), float(hi)))


def transform_reward(r: float, r_prior: float, params: CrtParams = CrtParams()) -> float:
    """[lam * (r - prior) + 1{r > prior}] * exp(r), with r clamped first.

    The indicator is strict, so ``r == prior`` maps to 0. Below ``prior - 1``
    the map decreases in r; that region is a property of the formula.
    """
    lo, hi = params.reward_clamp
    rc = min(max(float(r), lo), hi)
    step = 1.0 if rc > r_prior else 0.0
    return (params.lam * (rc - r_prior) + step) * math.exp(rc)


def transform_group(rewards: Sequence[float], r_prior: float, params: CrtParams = CrtParams()) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    rc = np.clip(r, *params.reward_clamp)
    # overflow with a wide clamp is left to the caller's finiteness check
    with np.errstate(over="ignore", invalid="ignore"):
        return (params.lam * (rc - r_prior) + (rc > r_prior)) * np.exp(rc)


def crt_group_loss(group: TrajectoryGroup, r_prior: float, params: CrtParams, policy, epsilon: float) -> float:
    """GRPO loss on the same trajectories with advantages from transformed rewards."""
    adv = compute_advantages(transform_group(group.rewards, r_prior, params))
    return grpo_group_loss(group, adv, policy, epsilon)


def crt_group_loss_and_gradient(group, r_prior, params, policy, epsilon):
    adv = compute_advantages(transform_group(group.rewards, r_prior, params))
    return grpo_group_loss_and_gradient(group, adv, policy, epsilon)
