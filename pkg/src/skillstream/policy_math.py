"""Group-relative advantages and the clipped surrogate objective.

Pure math over per-rollout scalars: advantages are rewards minus the
within-group mean (one scalar per rollout, applied uniformly to its
tokens by an external trainer), and the objective is the PPO-style
clipped importance-ratio surrogate without a KL term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

DEFAULT_EPSILON = 0.2


class PolicyMathError(Exception):
    pass


class GroupTooSmall(PolicyMathError):
    pass


class LengthMismatch(PolicyMathError):
    pass


class NonPositiveRatio(PolicyMathError):
    pass


def group_advantages(rewards: Sequence[float]) -> list[float]:
    """Per-rollout reward minus the group mean; sums to zero."""
    if len(rewards) < 2:
        raise GroupTooSmall("advantages need at least 2 rollouts")
    mean = sum(rewards) / len(rewards)
    return [r - mean for r in rewards]


def clipped_objective(
    ratios: Sequence[float],
    advantages: Sequence[float],
    epsilon: float = DEFAULT_EPSILON,
) -> float:
    """Mean over rollouts of ``min(rho * A, clip(rho, 1-eps, 1+eps) * A)``."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must be in (0, 1), got {epsilon}")
    if len(ratios) != len(advantages):
        raise LengthMismatch(f"{len(ratios)} ratios vs {len(advantages)} advantages")
    if not ratios:
        raise GroupTooSmall("objective needs at least 1 rollout")
    total = 0.0
    for rho, adv in zip(ratios, advantages):
        if rho <= 0.0:
            raise NonPositiveRatio(f"importance ratio must be positive, got {rho}")
        clipped = min(1.0 + epsilon, max(1.0 - epsilon, rho))
        total += min(rho * adv, clipped * adv)
    return total / len(ratios)


@dataclass(frozen=True)
class RolloutGroup:
    """Composite rewards for one group of rollouts, with optional ratios."""

    rewards: tuple[float, ...]
    ratios: tuple[float, ...] | None = None
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.ratios is not None:
            if len(self.ratios) != len(self.rewards):
                raise LengthMismatch("ratios and rewards differ in length")
            if any(rho <= 0.0 for rho in self.ratios):
                raise NonPositiveRatio("importance ratios must be positive")

    def advantages(self) -> list[float]:
        return group_advantages(self.rewards)

    def objective(self) -> float:
        if self.ratios is None:
            raise ValueError("objective needs importance ratios")
        return clipped_objective(self.ratios, self.advantages(), self.epsilon)
