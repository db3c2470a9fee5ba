"""Curation decisions: parse curator tool calls, validate, and apply them.

The three operations (insert/update/delete) arrive as tool-call objects of
the shape ``{"function_name": str, "arguments": {...}}`` where arguments
use the keys ``name`` / ``description`` / ``content``. Parsing is lenient:
malformed calls become data (``parse_failures``), not exceptions. Applying
is a pure fold over immutable repo snapshots.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence, Union

from .skill_store import Skill, SkillRepo, SkillStoreError

OP_INSERT = "insert_skill"
OP_UPDATE = "update_skill"
OP_DELETE = "delete_skill"

REASON_MALFORMED = "malformed_call"
REASON_EXISTS = "already_exists"
REASON_NOT_FOUND = "not_found"
REASON_INVALID = "invalid_skill"

# Tool schemas advertised to the curator model (chat-completions layout).
CURATION_TOOLS: tuple[dict, ...] = (
    {
        "type": "function",
        "function": {
            "name": OP_INSERT,
            "description": "Add a new skill to the repository.",
            "parameters": {
                "type": "object",
                "properties": {
                    "name": {"type": "string", "description": "Slug name for the skill."},
                    "description": {"type": "string", "description": "When to use the skill."},
                    "content": {"type": "string", "description": "Markdown instructions."},
                },
                "required": ["name", "description", "content"],
            },
        },
    },
    {
        "type": "function",
        "function": {
            "name": OP_UPDATE,
            "description": "Revise an existing skill's description and/or content.",
            "parameters": {
                "type": "object",
                "properties": {
                    "name": {"type": "string"},
                    "description": {"type": "string"},
                    "content": {"type": "string"},
                },
                "required": ["name"],
            },
        },
    },
    {
        "type": "function",
        "function": {
            "name": OP_DELETE,
            "description": "Remove a skill from the repository.",
            "parameters": {
                "type": "object",
                "properties": {"name": {"type": "string"}},
                "required": ["name"],
            },
        },
    },
)


@dataclass(frozen=True)
class InsertOp:
    name: str
    description: str
    body: str


@dataclass(frozen=True)
class UpdateOp:
    name: str
    description: str | None = None
    body: str | None = None

    def __post_init__(self) -> None:
        if self.description is None and self.body is None:
            raise ValueError("update must carry a description or a body")


@dataclass(frozen=True)
class DeleteOp:
    name: str


CurationOp = Union[InsertOp, UpdateOp, DeleteOp]


@dataclass(frozen=True)
class CurationDecision:
    """One curator response: raw text plus the ops recovered from it."""

    raw_text: str
    ops: tuple[CurationOp, ...] = ()
    parse_failures: int = 0

    @property
    def call_count(self) -> int:
        return len(self.ops) + self.parse_failures

    @property
    def is_empty(self) -> bool:
        return self.call_count == 0


@dataclass(frozen=True)
class OpOutcome:
    applied: bool
    reason: str | None = None


@dataclass(frozen=True)
class ApplyReport:
    """Per-call outcomes (parse failures included) and the resulting snapshot."""

    outcomes: tuple[OpOutcome, ...]
    repo: SkillRepo

    @property
    def applied_count(self) -> int:
        return sum(1 for o in self.outcomes if o.applied)


def _string_arg(args: Mapping[str, Any], key: str) -> str | None:
    value = args.get(key)
    return value if isinstance(value, str) else None


def _op_from_call(call: Any) -> CurationOp | None:
    """Build an op from one wire-shape call, or None if the call is malformed."""
    if not isinstance(call, Mapping):
        return None
    fname = call.get("function_name")
    args = call.get("arguments")
    if isinstance(args, str):
        try:
            args = json.loads(args)
        except json.JSONDecodeError:
            return None
    if not isinstance(args, Mapping):
        return None
    name = _string_arg(args, "name")
    if name is None or not name.strip():
        return None
    name = name.strip().lower()
    if fname == OP_INSERT:
        description = _string_arg(args, "description")
        content = _string_arg(args, "content")
        if description is None or content is None:
            return None
        return InsertOp(name=name, description=description, body=content)
    if fname == OP_UPDATE:
        description = _string_arg(args, "description")
        content = _string_arg(args, "content")
        if description is None and content is None:
            return None
        return UpdateOp(name=name, description=description, body=content)
    if fname == OP_DELETE:
        return DeleteOp(name=name)
    return None


def parse_decision(raw_text: str, tool_calls: Sequence[Any] = ()) -> CurationDecision:
    """Turn a curator response into a decision; bad calls count as failures."""
    ops: list[CurationOp] = []
    failures = 0
    for call in tool_calls:
        op = _op_from_call(call)
        if op is None:
            failures += 1
        else:
            ops.append(op)
    return CurationDecision(raw_text=raw_text, ops=tuple(ops), parse_failures=failures)


def _apply_one(skills: dict[str, Skill], op: CurationOp) -> OpOutcome:
    if isinstance(op, InsertOp):
        if op.name in skills:
            return OpOutcome(False, REASON_EXISTS)
        try:
            skills[op.name] = Skill(name=op.name, description=op.description.strip(), body=op.body)
        except SkillStoreError as exc:
            return OpOutcome(False, f"{REASON_INVALID}: {exc}")
        return OpOutcome(True)
    if isinstance(op, UpdateOp):
        current = skills.get(op.name)
        if current is None:
            return OpOutcome(False, REASON_NOT_FOUND)
        try:
            updated = replace(
                current,
                description=current.description if op.description is None else op.description.strip(),
                body=current.body if op.body is None else op.body,
            )
        except SkillStoreError as exc:
            return OpOutcome(False, f"{REASON_INVALID}: {exc}")
        skills[op.name] = updated
        return OpOutcome(True)
    if op.name not in skills:
        return OpOutcome(False, REASON_NOT_FOUND)
    del skills[op.name]
    return OpOutcome(True)


def apply_ops(repo: SkillRepo, decision: CurationDecision) -> ApplyReport:
    """Apply ops left-to-right against the evolving snapshot.

    Rejections are outcomes, not errors; parse failures are reported as
    rejected calls so ``|outcomes| == |ops| + parse_failures``. The revision
    bumps once iff at least one op applied.
    """
    skills = dict(repo.skills)
    outcomes = [_apply_one(skills, op) for op in decision.ops]
    outcomes.extend(OpOutcome(False, REASON_MALFORMED) for _ in range(decision.parse_failures))
    applied = any(o.applied for o in outcomes)
    new_repo = SkillRepo(skills=skills, revision=repo.revision + (1 if applied else 0))
    return ApplyReport(outcomes=tuple(outcomes), repo=new_repo)


def validity_fraction(report: ApplyReport) -> float:
    """Fraction of calls that applied; vacuously 1.0 when nothing was called."""
    if not report.outcomes:
        return 1.0
    return report.applied_count / len(report.outcomes)


def op_to_dict(op: CurationOp) -> dict:
    if isinstance(op, InsertOp):
        return {"op": "insert", "name": op.name, "description": op.description, "body": op.body}
    if isinstance(op, UpdateOp):
        return {"op": "update", "name": op.name, "description": op.description, "body": op.body}
    return {"op": "delete", "name": op.name}


def op_from_dict(data: Mapping[str, Any]) -> CurationOp:
    kind = data.get("op")
    if kind == "insert":
        return InsertOp(name=data["name"], description=data["description"], body=data["body"])
    if kind == "update":
        return UpdateOp(name=data["name"], description=data.get("description"), body=data.get("body"))
    if kind == "delete":
        return DeleteOp(name=data["name"])
    raise ValueError(f"unknown op kind: {kind!r}")


def decision_to_dict(decision: CurationDecision) -> dict:
    return {
        "raw_text": decision.raw_text,
        "ops": [op_to_dict(op) for op in decision.ops],
        "parse_failures": decision.parse_failures,
    }


def decision_from_dict(data: Mapping[str, Any]) -> CurationDecision:
    return CurationDecision(
        raw_text=data.get("raw_text", ""),
        ops=tuple(op_from_dict(item) for item in data.get("ops", [])),
        parse_failures=int(data.get("parse_failures", 0)),
    )
