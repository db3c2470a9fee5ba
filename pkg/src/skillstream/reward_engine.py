"""Composite curation reward and its four component signals.

The total is ``r_task + lambda_f * r_fc + lambda_u * r_cnt + lambda_c * r_comp``
computed over a group of per-task records. The first group position runs
against an empty repository, so the task-outcome term averages positions
2..|G| only; the other three terms average every position.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence


class RewardError(Exception):
    pass


class GroupTooSmall(RewardError):
    pass


class ZeroContext(RewardError):
    pass


class MissingJudgeScore(RewardError):
    def __init__(self, position: int):
        super().__init__(f"no judge score at group position {position}")
        self.position = position


@dataclass(frozen=True)
class TaskRecord:
    """Reward inputs for one group position."""

    success: bool
    validity: float
    judge_score: float | None
    repo_tokens: int
    context_tokens: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.validity <= 1.0:
            raise ValueError(f"validity out of range: {self.validity}")
        if self.judge_score is not None and not 0.0 <= self.judge_score <= 1.0:
            raise ValueError(f"judge score out of range: {self.judge_score}")
        if self.repo_tokens < 0 or self.context_tokens < 0:
            raise ValueError("token counts must be nonnegative")


@dataclass(frozen=True)
class RewardWeights:
    lambda_f: float = 1.0
    lambda_u: float = 0.1
    lambda_c: float = 0.05

    def __post_init__(self) -> None:
        if min(self.lambda_f, self.lambda_u, self.lambda_c) < 0:
            raise ValueError("reward weights must be nonnegative")


DEFAULT_WEIGHTS = RewardWeights()


@dataclass(frozen=True)
class RewardBreakdown:
    r_task: float
    r_fc: float
    r_cnt: float
    r_comp: float
    total: float
    weights: RewardWeights = DEFAULT_WEIGHTS

    def __post_init__(self) -> None:
        expected = (
            self.r_task
            + self.weights.lambda_f * self.r_fc
            + self.weights.lambda_u * self.r_cnt
            + self.weights.lambda_c * self.r_comp
        )
        if self.total != expected:
            raise ValueError(f"total {self.total!r} does not match components ({expected!r})")

    def to_dict(self) -> dict:
        return {
            "r_task": self.r_task,
            "r_fc": self.r_fc,
            "r_cnt": self.r_cnt,
            "r_comp": self.r_comp,
            "total": self.total,
            "weights": {
                "lambda_f": self.weights.lambda_f,
                "lambda_u": self.weights.lambda_u,
                "lambda_c": self.weights.lambda_c,
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RewardBreakdown":
        w = data.get("weights", {})
        return cls(
            r_task=data["r_task"],
            r_fc=data["r_fc"],
            r_cnt=data["r_cnt"],
            r_comp=data["r_comp"],
            total=data["total"],
            weights=RewardWeights(
                lambda_f=w.get("lambda_f", DEFAULT_WEIGHTS.lambda_f),
                lambda_u=w.get("lambda_u", DEFAULT_WEIGHTS.lambda_u),
                lambda_c=w.get("lambda_c", DEFAULT_WEIGHTS.lambda_c),
            ),
        )


def task_outcome_reward(records: Sequence[TaskRecord]) -> float:
    """Mean success over positions 2..|G| (the first position has no skills yet)."""
    if len(records) < 2:
        raise GroupTooSmall("task outcome reward needs a group of at least 2")
    tail = records[1:]
    return sum(1 for r in tail if r.success) / len(tail)


def function_call_reward(records: Sequence[TaskRecord]) -> float:
    """Mean valid-call fraction over every position."""
    if not records:
        raise GroupTooSmall("function call reward needs at least 1 record")
    return sum(r.validity for r in records) / len(records)


def compression_reward(records: Sequence[TaskRecord], clamp: bool = True) -> float:
    """Mean of ``1 - repo_tokens/context_tokens`` over every position.

    Each term is clamped to [0, 1] by default; a repo that outgrows the
    curator context then scores 0 rather than going negative.
    """
    if not records:
        raise GroupTooSmall("compression reward needs at least 1 record")
    terms = []
    for i, r in enumerate(records, start=1):
        if r.context_tokens < 1:
            raise ZeroContext(f"context length is zero at group position {i}")
        value = 1.0 - r.repo_tokens / r.context_tokens
        if clamp:
            value = min(1.0, max(0.0, value))
        terms.append(value)
    return sum(terms) / len(terms)


def content_quality_reward(records: Sequence[TaskRecord]) -> float:
    """Mean external-judge score over every position."""
    if not records:
        raise GroupTooSmall("content quality reward needs at least 1 record")
    total = 0.0
    for i, r in enumerate(records, start=1):
        if r.judge_score is None:
            raise MissingJudgeScore(i)
        total += r.judge_score
    return total / len(records)


def composite_reward(
    records: Sequence[TaskRecord],
    weights: RewardWeights = DEFAULT_WEIGHTS,
    clamp: bool = True,
) -> RewardBreakdown:
    r_task = task_outcome_reward(records)
    r_fc = function_call_reward(records)
    r_cnt = content_quality_reward(records)
    r_comp = compression_reward(records, clamp=clamp)
    total = r_task + weights.lambda_f * r_fc + weights.lambda_u * r_cnt + weights.lambda_c * r_comp
    return RewardBreakdown(
        r_task=r_task, r_fc=r_fc, r_cnt=r_cnt, r_comp=r_comp, total=total, weights=weights
    )
