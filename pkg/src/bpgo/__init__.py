"""Bayesian prior-guided GRPO (BPGO) on analytic toy policies."""

from .crt import CrtParams, crt_group_loss, transform_group, transform_reward
from .errors import (
    BpgoError,
    ConfigError,
    GroupTooSmall,
    InvalidAction,
    InvalidRatio,
    InvalidReward,
    InvalidWeight,
    MissingPriorContext,
    NonFiniteLoss,
    ShapeMismatch,
)
from .grpo import (
    Trajectory,
    TrajectoryGroup,
    clipped_surrogate,
    compute_advantages,
    grpo_group_loss,
    grpo_group_loss_gradient,
)
from .policy_env import (
    AmbiguousEnv,
    PromptSpec,
    RngStreams,
    TabularPolicy,
    default_env,
    logprob_and_grad,
    reward,
    sample_group,
    true_quality,
)
from .prior import Deviation, PriorContext, PriorEstimator, deviation
from .ras import RasParams, ras_weighted_loss, trust_weight
from .trainer import BpgoConfig, StepReport, ablation_suite, train, train_step

__version__ = "0.1.0"
