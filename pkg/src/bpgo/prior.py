"""Semantic prior estimation and prior-referenced deviations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence

import numpy as np

from .errors import GroupTooSmall, InvalidReward, MissingPriorContext

STRATEGIES = ("fixed", "reference_rollout", "first_observation", "running_mean")

_GLOBAL = "__global__"


@dataclass(frozen=True)
class PriorContext:
    """Per-prompt evidence a strategy may need.

    ``reference_rewards`` are rewards of rollouts from the frozen reference
    policy; ``baseline_reward`` is an environment-supplied anchor;
    ``group_mean`` is only read by a cold RunningMean estimator.
    """

    reference_rewards: Optional[Sequence[float]] = None
    baseline_reward: Optional[float] = None
    group_mean: Optional[float] = None


@dataclass(frozen=True)
class Deviation:
    group_delta: float
    sample_deltas: np.ndarray


@dataclass
class PriorEstimator:
    strategy: str = "running_mean"
    fixed_value: float = 0.0
    ema_decay: float = 0.9
    per_prompt: bool = False
    reference_samples: int = 4
    state: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown prior strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.reference_samples < 1:
            raise ValueError("reference_samples must be >= 1")

    def _key(self, prompt_id):
        return prompt_id if self.per_prompt else _GLOBAL

    def initialized(self, prompt_id: Hashable = None) -> bool:
        return self._key(prompt_id) in self.state

    def prior_for(self, prompt_id: Hashable, context: Optional[PriorContext] = None) -> float:
        """Return R_prior for ``prompt_id``. Never mutates the estimator."""
        ctx = context or PriorContext()
        if self.strategy == "fixed":
            return float(self.fixed_value)
        if self.strategy == "reference_rollout":
            if not ctx.reference_rewards:
                raise MissingPriorContext(f"reference rewards missing for prompt {prompt_id!r}")
            return float(np.mean(np.asarray(ctx.reference_rewards, dtype=np.float64)))
        if self.strategy == "first_observation":
            if ctx.baseline_reward is None:
                raise MissingPriorContext(f"baseline reward missing for prompt {prompt_id!r}")
            return float(ctx.baseline_reward)
        key = self._key(prompt_id)
        if key in self.state:
            return self.state[key]
        # cold start: the first observed group mean stands in for the prior
        if ctx.group_mean is None:
            raise MissingPriorContext(
                f"running-mean prior for {prompt_id!r} is uninitialised and no group mean was given"
            )
        return float(ctx.group_mean)

    def update(self, group_mean_reward: float, prompt_id: Hashable = None) -> None:
        """Fold one group mean into the running prior; no-op for other strategies."""
        x = float(group_mean_reward)
        if not math.isfinite(x):
            raise InvalidReward(f"non-finite group mean {group_mean_reward}")
        if self.strategy != "running_mean":
            return
        key = self._key(prompt_id)
        if key not in self.state:
            self.state[key] = x
        else:
            rho = self.ema_decay
            self.state[key] = rho * self.state[key] + (1.0 - rho) * x


def deviation(group_or_rewards, r_prior: float) -> Deviation:
    """Group-level and per-sample deviations from the prior.

    Accepts a :class:`~bpgo.grpo.TrajectoryGroup` with rewards or a plain
    reward sequence.
    """
    rewards = getattr(group_or_rewards, "rewards", group_or_rewards)
    if rewards is None:
        raise InvalidReward("group has no rewards")
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise GroupTooSmall(f"need at least 2 rewards, got shape {r.shape}")
    if not (np.all(np.isfinite(r)) and math.isfinite(r_prior)):
        raise InvalidReward("non-finite reward or prior")
    sample = r - r_prior
    return Deviation(group_delta=float(r.mean() - r_prior), sample_deltas=sample)
