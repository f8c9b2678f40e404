"""The BPGO training loop: GRPO base loss, trust weights, and the CRT auxiliary loss."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import statistics
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy as np

from .crt import CrtParams, transform_group
from .errors import ConfigError, NonFiniteLoss
from .grpo import compute_advantages, grpo_group_loss_and_gradient
from .optim import make_optimizer
from .policy_env import (
    INIT,
    NOISE,
    REFERENCE,
    REFERENCE_NOISE,
    AmbiguousEnv,
    RngStreams,
    TabularPolicy,
    reward,
    sample_actions,
    sample_group,
    true_quality,
)
from .prior import PriorContext, PriorEstimator
from .ras import RasParams, trust_weight

log = logging.getLogger(__name__)

ALPHA_GRID = (0.1, 0.5, 0.7, 0.9)


@dataclass
class PriorConfig:
    strategy: str = "running_mean"
    fixed_value: float = 0.0
    ema_decay: float = 0.9
    per_prompt: bool = False
    reference_samples: int = 4

    def build(self) -> PriorEstimator:
        return PriorEstimator(
            strategy=self.strategy,
            fixed_value=self.fixed_value,
            ema_decay=self.ema_decay,
            per_prompt=self.per_prompt,
            reference_samples=self.reference_samples,
        )


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def build(self):
        return make_optimizer(self.name, self.lr, self.beta1, self.beta2, self.eps)


@dataclass
class BpgoConfig:
    group_size: int = 8
    horizon: Optional[int] = None
    batch_prompts: Optional[int] = None
    steps: int = 200
    epsilon: float = 0.2
    alpha: float = 0.5
    k: float = 1.0
    lam: float = 1.0
    beta: float = 0.3
    reward_clamp: tuple = (-10.0, 10.0)
    inner_epochs: int = 1
    enable_ras: bool = True
    enable_crt: bool = True
    seed: int = 0
    workers: int = 1
    prior: PriorConfig = field(default_factory=PriorConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if isinstance(self.prior, dict):
            self.prior = PriorConfig(**self.prior)
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        self.reward_clamp = tuple(float(x) for x in self.reward_clamp)

    def validate(self, env: Optional[AmbiguousEnv] = None) -> "BpgoConfig":
        problems = []
        if not 0.0 < self.epsilon < 1.0:
            problems.append(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not self.beta >= 0.0:
            problems.append(f"beta must be >= 0, got {self.beta}")
        if self.group_size < 2:
            problems.append(f"group_size must be >= 2, got {self.group_size}")
        if not self.optimizer.lr > 0.0:
            problems.append(f"learning rate must be > 0, got {self.optimizer.lr}")
        if self.optimizer.name not in ("sgd", "adam"):
            problems.append(f"optimizer must be 'sgd' or 'adam', got {self.optimizer.name!r}")
        if self.steps < 0 or self.inner_epochs < 1 or self.workers < 1:
            problems.append("steps >= 0, inner_epochs >= 1 and workers >= 1 are required")
        if self.alpha < 0 or self.k <= 0 or self.lam <= 0:
            problems.append("alpha >= 0, k > 0 and lam > 0 are required")
        if not self.reward_clamp[0] < self.reward_clamp[1]:
            problems.append(f"reward_clamp must satisfy lo < hi, got {self.reward_clamp}")
        try:
            self.prior.build()
        except ValueError as exc:
            problems.append(str(exc))
        if env is not None:
            if self.horizon is not None and self.horizon != env.horizon:
                problems.append(f"horizon {self.horizon} disagrees with environment horizon {env.horizon}")
            if self.batch_prompts is not None and not 1 <= self.batch_prompts <= env.n_prompts:
                problems.append(f"batch_prompts must lie in 1..{env.n_prompts}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reward_clamp"] = list(self.reward_clamp)
        return d


@dataclass
class PromptRecord:
    prompt_id: int
    rewards: List[float]
    transformed_rewards: Optional[List[float]]
    true_quality: float
    r_prior: float
    delta: float
    weight: float
    loss_base: float
    loss_crt: Optional[float]


@dataclass
class StepReport:
    step: int
    prompts: List[PromptRecord]
    loss_ras: float
    loss_crt: Optional[float]
    loss_bpgo: float
    mean_raw_reward: float
    mean_true_quality: float
    expected_true_quality: float
    grad_norm: float
    gradient: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("gradient")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), allow_nan=False)


def batch_for_step(env: AmbiguousEnv, config: BpgoConfig, step: int) -> List[int]:
    """Prompts in step ``step``'s batch, in ascending id order (round-robin)."""
    n = env.n_prompts
    b = config.batch_prompts or n
    return sorted({(step * b + i) % n for i in range(b)})


def expected_true_quality(env: AmbiguousEnv, policy: TabularPolicy) -> float:
    """Mean over all prompts of the exact expected true quality."""
    return float(np.mean([env.expected_quality(policy, p) for p in range(env.n_prompts)]))


def build_prior_contexts(env: AmbiguousEnv, config: BpgoConfig, rng: RngStreams, reference: TabularPolicy) -> dict:
    """Static per-prompt prior evidence: env baselines and, if needed, reference-policy rollout rewards."""
    contexts = {}
    K = config.prior.reference_samples
    for p in range(env.n_prompts):
        ref_rewards = None
        if config.prior.strategy == "reference_rollout":
            acts, _ = sample_actions(reference, p, K, rng, 0, kind=REFERENCE)
            ref_rewards = tuple(
                reward(env, p, a, rng.generator(REFERENCE_NOISE, 0, p, j)) for j, a in enumerate(acts)
            )
        contexts[p] = PriorContext(reference_rewards=ref_rewards, baseline_reward=env.prompts[p].baseline_reward)
    return contexts


def _rollout(policy, env, config, rng, step, p):
    group = sample_group(policy, p, config.group_size, rng, step)
    rewards = [reward(env, p, tr, rng.generator(NOISE, step, p, j)) for j, tr in enumerate(group.trajectories)]
    tq = float(np.mean([true_quality(env, p, tr) for tr in group.trajectories]))
    return group.with_rewards(rewards), tq


@dataclass
class _GroupTerms:
    group: object
    base_adv: np.ndarray
    crt_adv: Optional[np.ndarray]
    transformed: Optional[np.ndarray]
    weight: float


def _objective(policy, terms: List[_GroupTerms], config: BpgoConfig):
    """(1/N) sum_i [w_i L_i + beta L_CRT,i] with w_i frozen; returns per-group pieces too."""
    per = []
    for gt in terms:
        lb, gb = grpo_group_loss_and_gradient(gt.group, gt.base_adv, policy, config.epsilon)
        if gt.crt_adv is not None:
            lc, gc = grpo_group_loss_and_gradient(gt.group, gt.crt_adv, policy, config.epsilon)
        else:
            lc, gc = None, None
        for val, what in ((lb, "base loss"), (lc, "CRT loss")):
            if val is not None and not math.isfinite(val):
                raise NonFiniteLoss(f"non-finite {what} for prompt {gt.group.prompt_id}", gt.group.prompt_id)
        if not np.all(np.isfinite(gb)) or (gc is not None and not np.all(np.isfinite(gc))):
            raise NonFiniteLoss(f"non-finite gradient for prompt {gt.group.prompt_id}", gt.group.prompt_id)
        per.append((lb, gb, lc, gc))
    n = len(terms)
    loss_ras = sum(gt.weight * lb for gt, (lb, _, _, _) in zip(terms, per)) / n
    grad = sum(gt.weight * gb for gt, (_, gb, _, _) in zip(terms, per)) / n
    loss_crt = None
    total = loss_ras
    if config.enable_crt:
        loss_crt = sum(lc for (_, _, lc, _) in per) / n
        total = loss_ras + config.beta * loss_crt
        grad = grad + config.beta * sum(gc for (_, _, _, gc) in per) / n
    return total, grad, loss_ras, loss_crt, per


def group_terms(group, r_prior: float, config: BpgoConfig) -> _GroupTerms:
    """Advantages, CRT rewards and the frozen trust weight for one rewarded group."""
    mean = float(np.mean(group.rewards))
    w = trust_weight(mean - r_prior, RasParams(config.alpha, config.k)) if config.enable_ras else 1.0
    transformed = crt_adv = None
    if config.enable_crt:
        transformed = transform_group(group.rewards, r_prior, CrtParams(config.lam, config.reward_clamp))
        if not np.all(np.isfinite(transformed)):
            raise NonFiniteLoss(f"non-finite transformed reward for prompt {group.prompt_id}", group.prompt_id)
        crt_adv = compute_advantages(transformed)
    return _GroupTerms(group, compute_advantages(group.rewards), crt_adv, transformed, w)


def bpgo_objective(policy, groups, r_priors, config: BpgoConfig):
    """Combined loss and its gradient over rewarded groups, trust weights held constant."""
    terms = [group_terms(g, rp, config) for g, rp in zip(groups, r_priors)]
    total, grad, _, _, _ = _objective(policy, terms, config)
    return total, grad


def train_step(
    policy: TabularPolicy,
    env: AmbiguousEnv,
    prior: PriorEstimator,
    config: BpgoConfig,
    rng: RngStreams,
    step: int = 0,
    optimizer=None,
    contexts: Optional[dict] = None,
):
    """One rollout batch and ``config.inner_epochs`` parameter updates.

    ``contexts`` holds the static prior evidence from
    :func:`build_prior_contexts`; when omitted it is built with ``policy`` as
    the reference policy. The prior estimator is queried for every prompt
    before it sees any of this step's group means.

    Returns the updated policy and a :class:`StepReport` whose losses and
    gradient are evaluated at the sampling-time parameters.
    """
    if optimizer is None:
        optimizer = config.optimizer.build()
    if contexts is None:
        contexts = build_prior_contexts(env, config, rng, policy)
    prompts = batch_for_step(env, config, step)
    quality_before = expected_true_quality(env, policy)

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            rolled = list(pool.map(lambda p: _rollout(policy, env, config, rng, step, p), prompts))
    else:
        rolled = [_rollout(policy, env, config, rng, step, p) for p in prompts]

    terms, priors, deltas = [], [], []
    for (group, _), p in zip(rolled, prompts):
        ctx = replace(contexts[p], group_mean=float(np.mean(group.rewards)))
        r_prior = prior.prior_for(p, ctx)
        terms.append(group_terms(group, r_prior, config))
        priors.append(r_prior)
        deltas.append(float(np.mean(group.rewards)) - r_prior)

    total, grad, loss_ras, loss_crt, per = _objective(policy, terms, config)
    if not math.isfinite(total):
        raise NonFiniteLoss(f"non-finite total loss at step {step}")

    theta = optimizer.step(policy.theta, grad)
    for _ in range(config.inner_epochs - 1):
        inner = policy.with_theta(theta)
        _, g, _, _, _ = _objective(inner, terms, config)
        theta = optimizer.step(theta, g)
    new_policy = policy.with_theta(theta)

    for gt in terms:
        prior.update(float(np.mean(gt.group.rewards)), gt.group.prompt_id)

    records = [
        PromptRecord(
            prompt_id=p,
            rewards=gt.group.rewards.tolist(),
            transformed_rewards=None if gt.transformed is None else gt.transformed.tolist(),
            true_quality=tq,
            r_prior=rp,
            delta=d,
            weight=gt.weight,
            loss_base=lb,
            loss_crt=lc,
        )
        for p, gt, (_, tq), rp, d, (lb, _, lc, _) in zip(prompts, terms, rolled, priors, deltas, per)
    ]
    report = StepReport(
        step=step,
        prompts=records,
        loss_ras=loss_ras,
        loss_crt=loss_crt,
        loss_bpgo=total,
        mean_raw_reward=float(np.mean([r for rec in records for r in rec.rewards])),
        mean_true_quality=float(np.mean([rec.true_quality for rec in records])),
        expected_true_quality=quality_before,
        grad_norm=float(np.linalg.norm(grad)),
        gradient=grad,
    )
    return new_policy, report


@dataclass
class RunResult:
    policy: TabularPolicy
    reports: List[StepReport]
    initial_true_quality: float
    final_true_quality: float
    aborted: Optional[NonFiniteLoss] = None

    @property
    def curve(self) -> List[float]:
        """Expected true quality before each step, then after the last one."""
        return [r.expected_true_quality for r in self.reports] + [self.final_true_quality]

    @property
    def auc(self) -> float:
        return float(np.trapezoid(self.curve))

    def summary(self) -> dict:
        return {
            "steps": len(self.reports),
            "initial_true_quality": self.initial_true_quality,
            "final_true_quality": self.final_true_quality,
            "final_raw_reward": self.reports[-1].mean_raw_reward if self.reports else None,
            "auc": self.auc,
            "aborted": self.aborted is not None,
        }


def _write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def initial_policy(env: AmbiguousEnv, init_scale: float = 0.0, seed: int = 0) -> TabularPolicy:
    """Uniform policy, or Gaussian logits with std ``init_scale``."""
    policy = TabularPolicy(env.n_prompts, env.horizon, env.vocab_size)
    if init_scale > 0.0:
        rng = RngStreams(seed).generator(INIT)
        policy = policy.with_theta(init_scale * rng.standard_normal(policy.dim))
    return policy


def train(
    config: BpgoConfig,
    env: AmbiguousEnv,
    policy: Optional[TabularPolicy] = None,
    metrics_path: Optional[str] = None,
    raise_on_abort: bool = False,
) -> RunResult:
    """Run ``config.steps`` training steps; optionally write one JSONL line per step.

    A :class:`NonFiniteLoss` stops the run; the reports collected so far are
    still written and the exception is kept on ``RunResult.aborted``.
    """
    config.validate(env)
    policy = policy if policy is not None else initial_policy(env)
    rng = RngStreams(config.seed)
    prior = config.prior.build()
    optimizer = config.optimizer.build()
    contexts = build_prior_contexts(env, config, rng, policy)
    initial = expected_true_quality(env, policy)
    reports: List[StepReport] = []
    aborted = None
    for step in range(config.steps):
        try:
            policy, report = train_step(policy, env, prior, config, rng, step, optimizer, contexts)
        except NonFiniteLoss as exc:
            log.error("step %d aborted: %s", step, exc)
            aborted = exc
            break
        reports.append(report)
    result = RunResult(policy, reports, initial, expected_true_quality(env, policy), aborted)
    if metrics_path is not None:
        _write_atomic(metrics_path, "".join(r.to_json() + "\n" for r in reports))
    if aborted is not None and raise_on_abort:
        raise aborted
    return result


ABLATIONS = {
    "GRPO": dict(enable_ras=False, enable_crt=False),
    "RAS": dict(enable_ras=True, enable_crt=False),
    "CRT": dict(enable_ras=False, enable_crt=True),
    "RAS+CRT": dict(enable_ras=True, enable_crt=True),
}


def ablation_configs(base: BpgoConfig) -> List[tuple]:
    """The four module ablations, then RAS+CRT over the alpha grid."""
    out = [(name, replace(base, **flags)) for name, flags in ABLATIONS.items()]
    for a in ALPHA_GRID:
        out.append((f"alpha={a}", replace(base, enable_ras=True, enable_crt=True, alpha=a)))
    return out


def ablation_suite(base_config: BpgoConfig, env: AmbiguousEnv, seeds=(0,), policy=None) -> List[dict]:
    """Per-configuration mean/median of final true quality and AUC across seeds."""
    rows = []
    for name, cfg in ablation_configs(base_config):
        finals, aucs = [], []
        for s in seeds:
            res = train(replace(cfg, seed=s), env, policy=policy)
            finals.append(res.final_true_quality)
            aucs.append(res.auc)
        rows.append(
            {
                "config": name,
                "alpha": cfg.alpha,
                "enable_ras": cfg.enable_ras,
                "enable_crt": cfg.enable_crt,
                "seeds": len(finals),
                "mean_final_true_quality": float(np.mean(finals)),
                "median_final_true_quality": float(statistics.median(finals)),
                "mean_auc": float(np.mean(aucs)),
                "median_auc": float(statistics.median(aucs)),
            }
        )
    return rows


def write_csv(rows: List[dict], path: str) -> None:
    if not rows:
        _write_atomic(path, "")
        return
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    _write_atomic(path, buf.getvalue())
