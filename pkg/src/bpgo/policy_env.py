"""Tabular softmax sequence policies and synthetic ambiguous-reward environments.

The policy is a logit table of shape (prompts, T, V): at step t of a prompt
the action distribution is softmax(theta[prompt, t]), independent of earlier
actions. Its log-prob gradients are exact (one-hot minus probabilities).

The environment maps every length-T action sequence to one of a few quality
classes through a salted hash, so many different outputs share one true
quality. Observed rewards add prompt-specific Gaussian noise on top.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import InvalidAction, ShapeMismatch
from .grpo import Trajectory, TrajectoryGroup

MAX_SEQUENCES = 1 << 20

# substream tags; never reorder, they are part of the reproducibility contract
SAMPLE, NOISE, REFERENCE, REFERENCE_NOISE, INIT = 0, 1, 2, 3, 4


class RngStreams:
    """Counter-based substreams: one independent generator per (kind, step, prompt, slot)."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, kind: int, step: int = 0, prompt_id: int = 0, slot: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, kind, step, prompt_id, slot])


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class TabularPolicy:
    """Per-(prompt, step) softmax policy; ``theta`` is the flat logit table."""

    n_prompts: int
    horizon: int
    vocab_size: int
    theta: Optional[np.ndarray] = None

    def __post_init__(self):
        shape = (self.n_prompts, self.horizon, self.vocab_size)
        if min(shape) < 1:
            raise ValueError(f"policy shape {shape} must be positive")
        if self.theta is None:
            self.theta = np.zeros(self.dim)
        self.theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if self.theta.size != self.dim:
            raise ShapeMismatch(f"theta has {self.theta.size} entries, expected {self.dim}")

    @property
    def dim(self) -> int:
        return self.n_prompts * self.horizon * self.vocab_size

    @property
    def table(self) -> np.ndarray:
        return self.theta.reshape(self.n_prompts, self.horizon, self.vocab_size)

    def with_theta(self, theta) -> "TabularPolicy":
        return TabularPolicy(self.n_prompts, self.horizon, self.vocab_size, np.array(theta, dtype=np.float64))

    def copy(self) -> "TabularPolicy":
        return self.with_theta(self.theta)

    def log_probs(self, prompt_id: int) -> np.ndarray:
        """(T, V) log-softmax table for one prompt."""
        return _log_softmax(self.table[self._check_prompt(prompt_id)])

    def probs(self, prompt_id: int) -> np.ndarray:
        return np.exp(self.log_probs(prompt_id))

    def _check_prompt(self, prompt_id) -> int:
        p = int(prompt_id)
        if not 0 <= p < self.n_prompts:
            raise ValueError(f"prompt {prompt_id!r} outside 0..{self.n_prompts - 1}")
        return p

    def _check_actions(self, actions: np.ndarray):
        if actions.shape[-1] != self.horizon:
            raise ShapeMismatch(f"horizon {actions.shape[-1]} != policy horizon {self.horizon}")
        if actions.min() < 0 or actions.max() >= self.vocab_size:
            raise InvalidAction(f"actions must lie in [0, {self.vocab_size}), got {actions.tolist()}")

    def step_logprobs(self, group: TrajectoryGroup) -> np.ndarray:
        acts = group.actions
        self._check_actions(acts)
        ls = self.log_probs(group.prompt_id)
        return ls[np.arange(self.horizon)[None, :], acts]

    def logprob_vjp(self, group: TrajectoryGroup, coef: np.ndarray) -> np.ndarray:
        acts = group.actions
        self._check_actions(acts)
        p = self._check_prompt(group.prompt_id)
        probs = self.probs(p)
        T, V = probs.shape
        block = -coef.sum(axis=0)[:, None] * probs
        np.add.at(block, (np.broadcast_to(np.arange(T), acts.shape), acts), coef)
        grad = np.zeros((self.n_prompts, T, V))
        grad[p] = block
        return grad.reshape(-1)


def logprob_and_grad(policy: TabularPolicy, trajectory: Trajectory, prompt_id: int):
    """Per-step log-probs (T,) and their gradients (T, dim) for one trajectory."""
    acts = trajectory.actions
    policy._check_actions(acts)
    p = policy._check_prompt(prompt_id)
    ls = policy.log_probs(p)
    T, V = ls.shape
    steps = np.arange(T)
    logp = ls[steps, acts]
    grads = np.zeros((T, policy.n_prompts, T, V))
    grads[steps, p, steps, :] = -np.exp(ls)
    grads[steps, p, steps, acts] += 1.0
    return logp, grads.reshape(T, -1)


def _draw_actions(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    # inverse-CDF: number of cumulative masses <= u
    idx = (u[..., None] >= cdf).sum(axis=-1)
    return np.minimum(idx, cdf.shape[-1] - 1)


def sample_actions(policy: TabularPolicy, prompt_id: int, n: int, rng, step: int = 0, kind: int = SAMPLE):
    """Draw n action sequences; returns ((n, T) actions, (n, T) log-probs).

    With :class:`RngStreams`, row j draws from its own (kind, step, prompt, j)
    substream, so a sample does not depend on how many others were drawn.
    """
    p = policy._check_prompt(prompt_id)
    ls = policy.log_probs(p)
    cdf = np.cumsum(np.exp(ls), axis=1)
    T = policy.horizon
    if isinstance(rng, RngStreams):
        u = np.stack([rng.generator(kind, step, p, j).random(T) for j in range(n)])
    else:
        u = rng.random((n, T))
    acts = _draw_actions(cdf, u)
    return acts, ls[np.arange(T)[None, :], acts]


def sample_group(
    policy: TabularPolicy,
    prompt_id: int,
    G: int,
    rng: Union[RngStreams, np.random.Generator],
    step: int = 0,
) -> TrajectoryGroup:
    """Ancestrally sample G trajectories, recording their sampling-time log-probs."""
    if G < 2:
        raise ValueError(f"group size must be >= 2, got {G}")
    acts, logp = sample_actions(policy, prompt_id, G, rng, step)
    p = int(prompt_id)
    states = tuple((p, t) for t in range(policy.horizon))
    return TrajectoryGroup(p, tuple(Trajectory(a, lp, states) for a, lp in zip(acts, logp)))


@dataclass(frozen=True)
class PromptSpec:
    class_quality: tuple = (0.2, 0.5, 0.8, 1.0)
    noise: float = 0.0
    baseline_reward: Optional[float] = None

    def __post_init__(self):
        q = tuple(float(x) for x in self.class_quality)
        object.__setattr__(self, "class_quality", q)
        if len(q) < 1 or not all(math.isfinite(x) for x in q):
            raise ValueError(f"class qualities must be finite and non-empty, got {q}")
        if not self.noise >= 0.0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")


@dataclass
class AmbiguousEnv:
    """Synthetic many-to-one reward environment.

    Sequence classes come from a salted blake2b hash of (seed, prompt,
    sequence index): a ``top_fraction`` share of sequences lands in the
    highest-quality class, the rest spread over the other classes.
    """

    vocab_size: int = 8
    horizon: int = 4
    prompts: Sequence[PromptSpec] = ()
    top_fraction: float = 0.1
    seed: int = 0
    _classes: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.prompts = tuple(p if isinstance(p, PromptSpec) else PromptSpec(**p) for p in self.prompts)
        if not self.prompts:
            raise ValueError("environment needs at least one prompt")
        if self.vocab_size < 1 or self.horizon < 1:
            raise ValueError("vocab_size and horizon must be >= 1")
        if self.n_sequences > MAX_SEQUENCES:
            raise ValueError(f"V^T = {self.n_sequences} exceeds the tabulation limit {MAX_SEQUENCES}")
        if not 0.0 <= self.top_fraction <= 1.0:
            raise ValueError(f"top_fraction must lie in [0, 1], got {self.top_fraction}")
        self._classes = [self._assign_classes(i, spec) for i, spec in enumerate(self.prompts)]
        filled = []
        for i, spec in enumerate(self.prompts):
            if spec.baseline_reward is None:
                base = float(np.mean(self.quality_table(i)))
                spec = PromptSpec(spec.class_quality, spec.noise, base)
            filled.append(spec)
        self.prompts = tuple(filled)

    @property
    def n_prompts(self) -> int:
        return len(self.prompts)

    @property
    def n_sequences(self) -> int:
        return self.vocab_size ** self.horizon

    def _assign_classes(self, prompt_id: int, spec: PromptSpec) -> np.ndarray:
        C = len(spec.class_quality)
        top = int(np.argmax(spec.class_quality))
        rest = [c for c in range(C) if c != top]
        out = np.empty(self.n_sequences, dtype=np.int64)
        for idx in range(self.n_sequences):
            d = hashlib.blake2b(f"{self.seed}:{prompt_id}:{idx}".encode(), digest_size=16).digest()
            u = int.from_bytes(d[:8], "little") / 2.0**64
            if not rest or u < self.top_fraction:
                out[idx] = top
            else:
                out[idx] = rest[int.from_bytes(d[8:], "little") % len(rest)]
        return out

    def sequence_index(self, actions) -> int:
        idx = 0
        for a in np.asarray(actions).tolist():
            if not 0 <= a < self.vocab_size:
                raise InvalidAction(f"action {a} outside vocabulary of {self.vocab_size}")
            idx = idx * self.vocab_size + a
        return idx

    def class_of(self, prompt_id: int, actions) -> int:
        return int(self._classes[prompt_id][self.sequence_index(actions)])

    def quality_table(self, prompt_id: int) -> np.ndarray:
        """True quality of every sequence, indexed base-V with action 0 most significant."""
        q = np.asarray(self.prompts[prompt_id].class_quality)
        return q[self._classes[prompt_id]]

    def expected_quality(self, policy: TabularPolicy, prompt_id: int) -> float:
        """Exact E[true quality] under the policy, by enumerating all V^T sequences."""
        probs = policy.probs(prompt_id)
        joint = probs[0]
        for t in range(1, self.horizon):
            joint = np.multiply.outer(joint, probs[t]).reshape(-1)
        return float(joint @ self.quality_table(prompt_id))

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "horizon": self.horizon,
            "top_fraction": self.top_fraction,
            "seed": self.seed,
            "prompts": [
                {"class_quality": list(p.class_quality), "noise": p.noise, "baseline_reward": p.baseline_reward}
                for p in self.prompts
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AmbiguousEnv":
        allowed = {"vocab_size", "horizon", "top_fraction", "seed", "prompts"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown environment keys: {sorted(unknown)}")
        prompts = []
        for p in d.get("prompts", ()):
            extra = set(p) - {"class_quality", "noise", "baseline_reward"}
            if extra:
                raise ValueError(f"unknown prompt keys: {sorted(extra)}")
            prompts.append(PromptSpec(**p))
        kw = {k: v for k, v in d.items() if k != "prompts"}
        return cls(prompts=prompts, **kw)


def default_env(seed: int = 0) -> AmbiguousEnv:
    """V=8, T=4, six prompts: three clear (noise 0.05), three ambiguous (noise 0.6)."""
    qualities = (0.2, 0.5, 0.8, 1.0)
    prompts = [PromptSpec(qualities, 0.05) for _ in range(3)] + [PromptSpec(qualities, 0.6) for _ in range(3)]
    return AmbiguousEnv(vocab_size=8, horizon=4, prompts=prompts, top_fraction=0.1, seed=seed)


def true_quality(env: AmbiguousEnv, prompt_id: int, trajectory) -> float:
    actions = getattr(trajectory, "actions", trajectory)
    return float(env.prompts[prompt_id].class_quality[env.class_of(prompt_id, actions)])


def reward(env: AmbiguousEnv, prompt_id: int, trajectory, rng: np.random.Generator) -> float:
    """True class quality plus N(0, noise^2); one normal draw from ``rng``."""
    noise = env.prompts[prompt_id].noise
    return true_quality(env, prompt_id, trajectory) + noise * float(rng.standard_normal())
