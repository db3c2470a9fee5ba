"""Rollout loops over task groups and streams, plus usage analytics.

Each group position runs the closed loop: retrieve top-k skills, let the
executor act in the environment, self-judge the outcome, let the curator
edit the repository, and record the reward inputs. Group runs start from
an empty repository; stream runs keep one repository alive across all
tasks. Everything is deterministic given the providers and seeds, and
traces serialize to canonical JSONL for byte-identical replay.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

from . import curation_protocol as cp
from . import policy_math
from . import reward_engine as rw
from .model_gateway import Gateway, GatewayError, chat_request, load_prompt, self_judge_success
from .model_gateway import judge_score as gateway_judge_score
from .skill_retrieval import build_index, retrieve
from .skill_store import SkillRepo, count_tokens, repo_token_length, serialize_skill

logger = logging.getLogger(__name__)

USAGE_DEFINITION = "retrieved_into_context"  # proxy: retrieval, not in-text invocation

_ACTION_RE = re.compile(r"^Action:\s*(.+)\s*$", re.MULTILINE)


class HarnessError(Exception):
    pass


class GroupTooSmall(HarnessError):
    pass


class GroupRunError(HarnessError):
    """Provider failure wrapped with its group position for context."""

    def __init__(self, position: int, task_id: str, cause: Exception):
        super().__init__(f"position {position} (task {task_id}): {cause}")
        self.position = position
        self.task_id = task_id


@dataclass(frozen=True)
class Task:
    id: str
    text: str
    label: str | None = None


def load_tasks(path: str | Path) -> list[Task]:
    """Read a task-stream JSONL file ({id, text, label?}) in order."""
    tasks = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            data = json.loads(line)
            try:
                tasks.append(
                    Task(id=str(data["id"]), text=str(data["text"]), label=data.get("label"))
                )
            except KeyError as exc:
                raise HarnessError(f"{path}:{line_no}: task record missing {exc}") from exc
    return tasks


@dataclass(frozen=True)
class TrajectoryStep:
    observation: str
    action: str


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[TrajectoryStep, ...]
    success: bool

    @property
    def step_count(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class StepOutcome:
    observation: str
    done: bool
    success: bool = False


class Environment(Protocol):
    def reset(self, task_text: str) -> str: ...

    def step(self, action: str) -> StepOutcome: ...


class EchoEnvironment:
    """Minimal environment: acknowledges actions, never terminates on its own.

    Suits reasoning-style tasks where the episode ends by answer or budget.
    """

    def reset(self, task_text: str) -> str:
        self._task = task_text
        return f"Task: {task_text}"

    def step(self, action: str) -> StepOutcome:
        if action.lower().startswith("answer"):
            return StepOutcome(observation="Answer submitted.", done=True, success=True)
        return StepOutcome(observation=f"Acknowledged: {action}", done=False)


class TextMazeEnvironment:
    """Deterministic toy text world bundled for tests.

    Rooms hold items; the task names a target item ("find the <item>").
    Actions: ``go <room>``, ``take <item>``, ``look``. Taking the target
    ends the episode successfully.
    """

    DEFAULT_ROOMS: Mapping[str, tuple[str, ...]] = {
        "kitchen": ("apple", "knife"),
        "hall": ("lamp",),
        "cellar": ("crate", "key"),
    }

    def __init__(self, rooms: Mapping[str, tuple[str, ...]] | None = None):
        self.rooms = dict(rooms or self.DEFAULT_ROOMS)

    def reset(self, task_text: str) -> str:
        self.location = next(iter(self.rooms))
        match = re.search(r"find the (\w+)", task_text.lower())
        self.target = match.group(1) if match else ""
        return self._describe()

    def _describe(self) -> str:
        items = ", ".join(self.rooms[self.location]) or "nothing"
        doors = ", ".join(sorted(self.rooms))
        return f"You are in the {self.location}. You see: {items}. Rooms: {doors}."

    def step(self, action: str) -> StepOutcome:
        words = action.lower().split()
        if len(words) >= 2 and words[0] == "go" and words[1] in self.rooms:
            self.location = words[1]
            return StepOutcome(observation=self._describe(), done=False)
        if len(words) >= 2 and words[0] == "take":
            item = words[1]
            if item in self.rooms[self.location]:
                done = item == self.target
                return StepOutcome(
                    observation=f"You take the {item}.", done=done, success=done
                )
            return StepOutcome(observation=f"There is no {item} here.", done=False)
        if words[:1] == ["look"]:
            return StepOutcome(observation=self._describe(), done=False)
        return StepOutcome(observation="Nothing happens.", done=False)


@dataclass
class Clients:
    """Everything a run talks to: the model gateway and an environment factory."""

    gateway: Gateway
    make_environment: Callable[[], Environment]


@dataclass(frozen=True)
class HarnessParams:
    top_k: int = 5
    max_turns: int = 30
    action_history: int = 3
    rollout_group_size: int = 8
    use_env_success: bool = False
    empty_decision_judge: float = 0.5
    clamp_compression: bool = True
    weights: rw.RewardWeights = rw.DEFAULT_WEIGHTS
    prompt_flavor: str = "agentic"  # executor/success-judge template family
    prompts_dir: str | None = None


@dataclass(frozen=True)
class PositionTrace:
    """Everything recorded at one group/stream position."""

    position: int
    task_id: str
    retrieved: tuple[str, ...]
    trajectory: Trajectory
    judge_success: bool
    env_success: bool
    decision: cp.CurationDecision
    outcomes: tuple[cp.OpOutcome, ...]
    record: rw.TaskRecord
    repo_size: int
    repo_revision: int


@dataclass(frozen=True)
class GroupRollout:
    group_id: str
    rollout_index: int
    seed: int
    positions: tuple[PositionTrace, ...]
    reward: rw.RewardBreakdown
    final_repo: SkillRepo


def parse_action(text: str) -> str:
    """Last ``Action:`` line of the reply, or the whole reply stripped."""
    matches = _ACTION_RE.findall(text)
    return matches[-1].strip() if matches else text.strip()


def render_skills(skill_docs: Sequence[str]) -> str:
    return "\n\n".join(skill_docs) if skill_docs else "(none)"


def render_trajectory(steps: Sequence[TrajectoryStep]) -> str:
    if not steps:
        return "(no steps)"
    lines = []
    for i, step in enumerate(steps, start=1):
        lines.append(f"[{i}] Observation: {step.observation}")
        lines.append(f"[{i}] Action: {step.action}")
    return "\n".join(lines)


def _run_episode(
    task: Task,
    skills_text: str,
    clients: Clients,
    params: HarnessParams,
) -> tuple[list[TrajectoryStep], bool]:
    """ReAct-style episode; returns the steps and the environment's verdict."""
    template = load_prompt(f"executor_{params.prompt_flavor}", params.prompts_dir)
    env = clients.make_environment()
    observation = env.reset(task.text)
    steps: list[TrajectoryStep] = []
    env_success = False
    for _ in range(params.max_turns):
        history = [s.action for s in steps[-params.action_history :]]
        prompt = template.format(
            task=task.text,
            skills=skills_text,
            history="\n".join(f"- {a}" for a in history) if history else "(none)",
            observation=observation,
        )
        reply = clients.gateway.complete("executor", chat_request(("user", prompt)))
        action = parse_action(reply.text)
        outcome = env.step(action)
        steps.append(TrajectoryStep(observation=observation, action=action))
        observation = outcome.observation
        if outcome.done:
            env_success = outcome.success
            break
    return steps, env_success


def _run_position(
    position: int,
    task: Task,
    repo: SkillRepo,
    clients: Clients,
    params: HarnessParams,
) -> tuple[PositionTrace, SkillRepo]:
    index = build_index(repo)
    hits = retrieve(index, task.text, params.top_k)
    retrieved = tuple(name for name, _ in hits)
    skills_text = render_skills([serialize_skill(repo.skills[name]) for name in retrieved])

    steps, env_success = _run_episode(task, skills_text, clients, params)
    trajectory_text = render_trajectory(steps)
    judged = self_judge_success(
        clients.gateway, task.text, trajectory_text, params.prompt_flavor, params.prompts_dir
    )
    success = env_success if params.use_env_success else judged
    trajectory = Trajectory(steps=tuple(steps), success=success)

    # Curator context, in contract order: system prompt, trajectory,
    # self-judged flag, retrieved skills.
    system_prompt = load_prompt("curator_system", params.prompts_dir)
    context = load_prompt("curator_context", params.prompts_dir).format(
        task=task.text,
        trajectory=trajectory_text,
        outcome="SUCCESS" if judged else "FAILURE",
        skills=skills_text,
    )
    request = chat_request(
        ("system", system_prompt), ("user", context), tools=cp.CURATION_TOOLS
    )
    context_tokens = sum(count_tokens(m.content) for m in request.messages)

    reply = clients.gateway.complete("curator", request)
    decision = cp.parse_decision(reply.text, reply.tool_calls)
    report = cp.apply_ops(repo, decision)

    if decision.is_empty:
        quality = params.empty_decision_judge
    else:
        quality = gateway_judge_score(
            clients.gateway, decision, trajectory_text, params.prompts_dir
        )

    record = rw.TaskRecord(
        success=success,
        validity=cp.validity_fraction(report),
        judge_score=quality,
        repo_tokens=repo_token_length(report.repo),
        context_tokens=context_tokens,
    )
    trace = PositionTrace(
        position=position,
        task_id=task.id,
        retrieved=retrieved,
        trajectory=trajectory,
        judge_success=judged,
        env_success=env_success,
        decision=decision,
        outcomes=report.outcomes,
        record=record,
        repo_size=len(report.repo),
        repo_revision=report.repo.revision,
    )
    return trace, report.repo


def run_group(
    group: Sequence[Task],
    clients: Clients,
    params: HarnessParams,
    seed: int = 0,
    group_id: str = "",
    rollout_index: int = 0,
) -> GroupRollout:
    """One rollout of the whole curation sequence, starting from an empty repo."""
    if len(group) < 2:
        raise GroupTooSmall("a task group needs at least 2 tasks")
    repo = SkillRepo.empty()
    positions: list[PositionTrace] = []
    for i, task in enumerate(group, start=1):
        try:
            trace, repo = _run_position(i, task, repo, clients, params)
        except GatewayError as exc:
            raise GroupRunError(i, task.id, exc) from exc
        positions.append(trace)
    breakdown = rw.composite_reward(
        [p.record for p in positions], params.weights, clamp=params.clamp_compression
    )
    return GroupRollout(
        group_id=group_id,
        rollout_index=rollout_index,
        seed=seed,
        positions=tuple(positions),
        reward=breakdown,
        final_repo=repo,
    )


@dataclass(frozen=True)
class RolloutGroupResult:
    rollouts: tuple[GroupRollout, ...]
    advantages: tuple[float, ...]

    def advantage_records(self) -> list[dict]:
        return [
            {
                "group_id": r.group_id,
                "rollout": r.rollout_index,
                "reward": r.reward.total,
                "advantage": a,
            }
            for r, a in zip(self.rollouts, self.advantages)
        ]


def run_rollout_group(
    group: Sequence[Task],
    clients: Clients,
    params: HarnessParams,
    n_rollouts: int | None = None,
    seeds: Sequence[int] | None = None,
    group_id: str = "",
    jobs: int = 1,
) -> RolloutGroupResult:
    """N independent rollouts of the same group; repo histories do not mix."""
    n = n_rollouts if n_rollouts is not None else params.rollout_group_size
    if n < 2:
        raise GroupTooSmall("a rollout group needs at least 2 rollouts")
    if seeds is None:
        seeds = list(range(n))
    if len(seeds) != n:
        raise ValueError("one seed per rollout expected")

    def one(idx: int) -> GroupRollout:
        return run_group(
            group, clients, params, seed=seeds[idx], group_id=group_id, rollout_index=idx
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rollouts = list(pool.map(one, range(n)))
    else:
        rollouts = [one(i) for i in range(n)]
    advantages = policy_math.group_advantages([r.reward.total for r in rollouts])
    return RolloutGroupResult(rollouts=tuple(rollouts), advantages=tuple(advantages))


# --- streaming evaluation -----------------------------------------------------


@dataclass(frozen=True)
class StreamMetrics:
    task_count: int
    success_rate: float
    success_rate_by_label: Mapping[str, float]
    mean_steps: float
    usage_rate: float
    successful_usage_rate: float
    successful_usage_defined: bool
    coverage: float
    mean_skills_per_example: float
    op_proportions: tuple[float, float, float]  # insert, update, delete
    op_proportions_by_bucket: tuple[tuple[float, float, float], ...]
    usage_definition: str = USAGE_DEFINITION

    def to_dict(self) -> dict:
        return {
            "task_count": self.task_count,
            "success_rate": self.success_rate,
            "success_rate_by_label": dict(self.success_rate_by_label),
            "mean_steps": self.mean_steps,
            "usage_rate": self.usage_rate,
            "successful_usage_rate": self.successful_usage_rate,
            "successful_usage_defined": self.successful_usage_defined,
            "coverage": self.coverage,
            "mean_skills_per_example": self.mean_skills_per_example,
            "op_proportions": {
                "insert": self.op_proportions[0],
                "update": self.op_proportions[1],
                "delete": self.op_proportions[2],
            },
            "op_proportions_by_bucket": [
                {"insert": b[0], "update": b[1], "delete": b[2]}
                for b in self.op_proportions_by_bucket
            ],
            "usage_definition": self.usage_definition,
        }


@dataclass(frozen=True)
class StreamResult:
    positions: tuple[PositionTrace, ...]
    final_repo: SkillRepo
    metrics: StreamMetrics
    reward: rw.RewardBreakdown | None
    tasks: tuple[Task, ...]


def _op_counts(decisions: Iterable[cp.CurationDecision]) -> tuple[int, int, int]:
    ins = upd = dele = 0
    for decision in decisions:
        for op in decision.ops:
            if isinstance(op, cp.InsertOp):
                ins += 1
            elif isinstance(op, cp.UpdateOp):
                upd += 1
            else:
                dele += 1
    return ins, upd, dele


def _proportions(counts: tuple[int, int, int]) -> tuple[float, float, float]:
    total = sum(counts)
    if total == 0:
        return (0.0, 0.0, 0.0)
    return (counts[0] / total, counts[1] / total, counts[2] / total)


def compute_metrics(
    positions: Sequence[PositionTrace],
    final_repo: SkillRepo,
    tasks: Sequence[Task] = (),
    buckets: int = 4,
) -> StreamMetrics:
    """Usage/coverage analytics over a finished stream (or one rollout)."""
    n = len(positions)
    if n == 0:
        raise HarnessError("metrics need at least one position")
    successes = sum(1 for p in positions if p.record.success)
    used = [p for p in positions if p.retrieved]
    used_successes = sum(1 for p in used if p.record.success)
    distinct_retrieved = {name for p in positions for name in p.retrieved}

    labels: dict[str, list[bool]] = {}
    by_id = {t.id: t for t in tasks}
    for p in positions:
        label = by_id[p.task_id].label if p.task_id in by_id else None
        if label:
            labels.setdefault(label, []).append(p.record.success)

    ops_total = _op_counts(p.decision for p in positions)
    bucket_props = []
    if n and buckets > 0:
        size = max(1, -(-n // buckets))  # ceil division
        for start in range(0, n, size):
            chunk = positions[start : start + size]
            bucket_props.append(_proportions(_op_counts(p.decision for p in chunk)))

    return StreamMetrics(
        task_count=n,
        success_rate=successes / n,
        success_rate_by_label={
            label: sum(flags) / len(flags) for label, flags in sorted(labels.items())
        },
        mean_steps=sum(p.trajectory.step_count for p in positions) / n,
        usage_rate=len(used) / n,
        successful_usage_rate=used_successes / len(used) if used else 0.0,
        successful_usage_defined=bool(used),
        coverage=(len(distinct_retrieved & set(final_repo.names())) / len(final_repo))
        if len(final_repo)
        else 0.0,
        mean_skills_per_example=sum(len(p.retrieved) for p in positions) / n,
        op_proportions=_proportions(ops_total),
        op_proportions_by_bucket=tuple(bucket_props),
    )


def run_stream(
    tasks: Sequence[Task],
    clients: Clients,
    params: HarnessParams,
    initial_repo: SkillRepo | None = None,
) -> StreamResult:
    """Test-time streaming: one persistent repo, curator invoked after every task."""
    if not tasks:
        raise HarnessError("a stream needs at least one task")
    repo = initial_repo if initial_repo is not None else SkillRepo.empty()
    positions: list[PositionTrace] = []
    for i, task in enumerate(tasks, start=1):
        try:
            trace, repo = _run_position(i, task, repo, clients, params)
        except GatewayError as exc:
            raise GroupRunError(i, task.id, exc) from exc
        positions.append(trace)
    reward = None
    if len(positions) >= 2:
        reward = rw.composite_reward(
            [p.record for p in positions], params.weights, clamp=params.clamp_compression
        )
    metrics = compute_metrics(positions, repo, tasks)
    return StreamResult(
        positions=tuple(positions),
        final_repo=repo,
        metrics=metrics,
        reward=reward,
        tasks=tuple(tasks),
    )


# --- trace serialization ------------------------------------------------------


def canonical_json(data: Mapping) -> str:
    return json.dumps(data, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def position_record(group_id: str, rollout_index: int, trace: PositionTrace) -> dict:
    return {
        "type": "position",
        "group_id": group_id,
        "rollout": rollout_index,
        "position": trace.position,
        "task_id": trace.task_id,
        "retrieved": list(trace.retrieved),
        "steps": trace.trajectory.step_count,
        "success": trace.record.success,
        "judge_success": trace.judge_success,
        "env_success": trace.env_success,
        "validity": trace.record.validity,
        "judge_score": trace.record.judge_score,
        "repo_tokens": trace.record.repo_tokens,
        "context_tokens": trace.record.context_tokens,
        "ops": [cp.op_to_dict(op) for op in trace.decision.ops],
        "parse_failures": trace.decision.parse_failures,
        "outcomes": [
            {"applied": o.applied, "reason": o.reason} for o in trace.outcomes
        ],
        "repo_size": trace.repo_size,
        "repo_revision": trace.repo_revision,
    }


def reward_record(group_id: str, rollout_index: int, reward: rw.RewardBreakdown) -> dict:
    record = {"type": "reward", "group_id": group_id, "rollout": rollout_index}
    record.update(reward.to_dict())
    return record


def rollout_lines(rollout: GroupRollout) -> list[str]:
    lines = [
        canonical_json(position_record(rollout.group_id, rollout.rollout_index, p))
        for p in rollout.positions
    ]
    lines.append(canonical_json(reward_record(rollout.group_id, rollout.rollout_index, rollout.reward)))
    return lines


def write_rollout_trace(rollout: GroupRollout, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for line in rollout_lines(rollout):
            handle.write(line + "\n")


def stream_lines(result: StreamResult, stream_id: str = "stream") -> list[str]:
    lines = [canonical_json(position_record(stream_id, 0, p)) for p in result.positions]
    if result.reward is not None:
        lines.append(canonical_json(reward_record(stream_id, 0, result.reward)))
    return lines


def write_stream_trace(result: StreamResult, path: str | Path, stream_id: str = "stream") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for line in stream_lines(result, stream_id):
            handle.write(line + "\n")


@dataclass(frozen=True)
class TraceReplay:
    """Reward inputs recovered from one trace file."""

    records: tuple[rw.TaskRecord, ...]
    stored: rw.RewardBreakdown | None


def read_trace(path: str | Path) -> TraceReplay:
    """Parse a rollout/stream trace back into reward inputs.

    Raises HarnessError with the offending line number on damage.
    """
    records: list[rw.TaskRecord] = []
    stored: rw.RewardBreakdown | None = None
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise HarnessError(f"{path}:{line_no}: damaged trace line ({exc})") from exc
            kind = data.get("type")
            if kind == "position":
                try:
                    records.append(
                        rw.TaskRecord(
                            success=data["success"],
                            validity=data["validity"],
                            judge_score=data["judge_score"],
                            repo_tokens=data["repo_tokens"],
                            context_tokens=data["context_tokens"],
                        )
                    )
                except (KeyError, ValueError) as exc:
                    raise HarnessError(f"{path}:{line_no}: bad position record ({exc})") from exc
            elif kind == "reward":
                try:
                    stored = rw.RewardBreakdown.from_dict(data)
                except (KeyError, ValueError) as exc:
                    raise HarnessError(f"{path}:{line_no}: bad reward record ({exc})") from exc
    if not records:
        raise HarnessError(f"{path}: no position records found")
    return TraceReplay(records=tuple(records), stored=stored)
