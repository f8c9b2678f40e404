"""Group-relative advantages and the clipped-surrogate GRPO loss.

Index convention: ``j`` runs over the G samples of one group, ``t`` over the
T steps of one trajectory. One advantage per trajectory is broadcast over all
of its steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Optional, Protocol, Sequence

import numpy as np

from .errors import GroupTooSmall, InvalidRatio, InvalidReward, ShapeMismatch

DEGENERATE_STD = 1e-12
RATIO_MIN = 1e-8
RATIO_MAX = 1e8
_LOG_RATIO_MIN = math.log(RATIO_MIN)
_LOG_RATIO_MAX = math.log(RATIO_MAX)


@dataclass(frozen=True)
class Trajectory:
    """One sampled output: T actions plus their behaviour-policy log-probs."""

    actions: np.ndarray
    old_logprobs: np.ndarray
    states: tuple = ()

    def __post_init__(self):
        actions = np.asarray(self.actions, dtype=np.int64)
        old = np.asarray(self.old_logprobs, dtype=np.float64)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "old_logprobs", old)
        if actions.ndim != 1 or actions.shape != old.shape:
            raise ShapeMismatch(
                f"actions {actions.shape} and old_logprobs {old.shape} must be equal-length vectors"
            )
        if self.states and len(self.states) != len(actions):
            raise ShapeMismatch(f"{len(self.states)} states for {len(actions)} actions")
        if len(actions) < 1:
            raise ShapeMismatch("trajectory horizon must be >= 1")
        if np.any(old > 0.0) or not np.all(np.isfinite(old)):
            raise ValueError("old_logprobs must be finite and <= 0")

    @property
    def horizon(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class TrajectoryGroup:
    """G trajectories sampled for one prompt, optionally with their rewards."""

    prompt_id: Hashable
    trajectories: tuple
    rewards: Optional[np.ndarray] = None
    _actions: np.ndarray = field(init=False, repr=False, compare=False)
    _old_logprobs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        object.__setattr__(self, "trajectories", trajs)
        if len(trajs) < 2:
            raise GroupTooSmall(f"group for prompt {self.prompt_id!r} has {len(trajs)} < 2 samples")
        horizons = {tr.horizon for tr in trajs}
        if len(horizons) != 1:
            raise ShapeMismatch(f"mixed horizons {sorted(horizons)} in group {self.prompt_id!r}")
        object.__setattr__(self, "_actions", np.stack([tr.actions for tr in trajs]))
        object.__setattr__(self, "_old_logprobs", np.stack([tr.old_logprobs for tr in trajs]))
        if self.rewards is not None:
            rewards = np.asarray(self.rewards, dtype=np.float64)
            if rewards.shape != (len(trajs),):
                raise ShapeMismatch(f"{rewards.shape} rewards for {len(trajs)} trajectories")
            object.__setattr__(self, "rewards", rewards)

    @property
    def size(self) -> int:
        return len(self.trajectories)

    @property
    def horizon(self) -> int:
        return self.trajectories[0].horizon

    @property
    def actions(self) -> np.ndarray:
        """(G, T) integer action matrix."""
        return self._actions

    @property
    def old_logprobs(self) -> np.ndarray:
        """(G, T) frozen behaviour-policy log-probabilities."""
        return self._old_logprobs

    def with_rewards(self, rewards) -> "TrajectoryGroup":
        return TrajectoryGroup(self.prompt_id, self.trajectories, rewards)


class Policy(Protocol):
    """What the loss needs from a differentiable policy."""

    @property
    def dim(self) -> int: ...

    def step_logprobs(self, group: TrajectoryGroup) -> np.ndarray:
        """(G, T) log pi_theta(a_t | s_t) under the current parameters."""
        ...

    def logprob_vjp(self, group: TrajectoryGroup, coef: np.ndarray) -> np.ndarray:
        """sum_{j,t} coef[j, t] * grad_theta log pi_theta(a_jt | s_jt)."""
        ...


def compute_advantages(rewards: Sequence[float]) -> np.ndarray:
    """Standardize rewards within a group (population std).

    A group whose population std is below ``1e-12`` carries no ranking
    information and gets all-zero advantages.

    Raises:
        GroupTooSmall: fewer than two rewards.
        InvalidReward: any reward is NaN or infinite.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise GroupTooSmall(f"need at least 2 rewards, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise InvalidReward(f"non-finite reward in {r.tolist()}")
    centered = r - r.mean()
    std = math.sqrt(float(np.mean(centered * centered)))
    if std < DEGENERATE_STD:
        return np.zeros_like(r)
    return centered / std


def clipped_surrogate(ratio: float, advantage: float, epsilon: float) -> float:
    """min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)."""
    if not ratio > 0.0:
        raise InvalidRatio(f"ratio must be positive, got {ratio}")
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    return min(ratio * advantage, clipped * advantage)


def _surrogate_terms(group, advantages, policy, epsilon):
    adv = np.asarray(advantages, dtype=np.float64)
    if adv.shape != (group.size,):
        raise ShapeMismatch(f"{adv.shape} advantages for a group of {group.size}")
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    logp = policy.step_logprobs(group)
    if logp.shape != group.old_logprobs.shape:
        raise ShapeMismatch(f"policy returned {logp.shape}, expected {group.old_logprobs.shape}")
    log_ratio = logp - group.old_logprobs
    in_range = (log_ratio >= _LOG_RATIO_MIN) & (log_ratio <= _LOG_RATIO_MAX)
    ratio = np.exp(np.clip(log_ratio, _LOG_RATIO_MIN, _LOG_RATIO_MAX))
    a = adv[:, None]
    unclipped = ratio * a
    clipped = np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * a
    # ties (inside the trust region or exactly on its edge) take the unclipped branch
    take_unclipped = unclipped <= clipped
    values = np.where(take_unclipped, unclipped, clipped)
    return values, ratio, take_unclipped & in_range, a


def grpo_group_loss(group: TrajectoryGroup, advantages, policy: Policy, epsilon: float) -> float:
    """Per-prompt GRPO loss: negated mean clipped surrogate over samples and steps."""
    values, _, _, _ = _surrogate_terms(group, advantages, policy, epsilon)
    return -float(values.mean())


def grpo_group_loss_gradient(group: TrajectoryGroup, advantages, policy: Policy, epsilon: float) -> np.ndarray:
    """Exact gradient of :func:`grpo_group_loss` with respect to the policy parameters.

    The clipped branch is constant in theta, so only steps on the unclipped
    branch contribute ``A * ratio * grad log pi``.
    """
    _, ratio, active, a = _surrogate_terms(group, advantages, policy, epsilon)
    G, T = ratio.shape
    coef = np.where(active, a * ratio, 0.0) * (-1.0 / (G * T))
    return policy.logprob_vjp(group, coef)


def grpo_group_loss_and_gradient(group, advantages, policy, epsilon):
    values, ratio, active, a = _surrogate_terms(group, advantages, policy, epsilon)
    G, T = ratio.shape
    coef = np.where(active, a * ratio, 0.0) * (-1.0 / (G * T))
    return -float(values.mean()), policy.logprob_vjp(group, coef)
