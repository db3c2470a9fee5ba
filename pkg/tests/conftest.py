"""Shared fixtures: deterministic embedders, corpus helpers, scripted runs."""

from __future__ import annotations

import json
import math
from pathlib import Path

import pytest

from skillstream.model_gateway import ChatResponse, EmbeddingBatch, Gateway, ScriptedProvider, StubEmbedder
from skillstream.stream_harness import Clients, HarnessParams, Task, TextMazeEnvironment
from skillstream.task_grouping import AnnotatedTask, AttributeSet

DATA_DIR = Path(__file__).parent / "data"


class TableEmbedder:
    """Test embedder with hand-chosen vectors; unknown phrases get fresh
    orthogonal-ish stub vectors."""

    def __init__(self, table: dict[str, tuple[float, ...]], dim: int = 8):
        self.dim = dim
        self.table = {}
        for phrase, vec in table.items():
            norm = math.sqrt(sum(x * x for x in vec))
            self.table[phrase] = tuple(x / norm for x in vec)
        self._fallback = StubEmbedder(dim=dim, tag="table-fallback")

    def embed(self, phrases):
        vectors = []
        for phrase in phrases:
            if phrase in self.table:
                vectors.append(self.table[phrase])
            else:
                vectors.append(self._fallback.embed([phrase]).vectors[0])
        return EmbeddingBatch(phrases=tuple(phrases), vectors=tuple(vectors))


def basis(dim: int, i: int, scale: float = 1.0) -> tuple[float, ...]:
    vec = [0.0] * dim
    vec[i] = scale
    return tuple(vec)


@pytest.fixture()
def stub_embedder() -> StubEmbedder:
    return StubEmbedder()


def make_task(
    task_id: str,
    difficulty: float | None = 1.0,
    topics=(),
    skills=(),
    concepts=(),
    strategies=(),
    pitfalls=(),
    text: str = "",
    label: str | None = None,
) -> AnnotatedTask:
    return AnnotatedTask(
        id=task_id,
        text=text or f"task {task_id}",
        attributes=AttributeSet(
            topics=tuple(topics),
            skills=tuple(skills),
            concepts=tuple(concepts),
            strategies=tuple(strategies),
            pitfalls=tuple(pitfalls),
        ),
        difficulty=difficulty,
        label=label,
    )


def text_response(text: str) -> ChatResponse:
    return ChatResponse(text=text)


def tool_response(text: str, *calls: dict) -> ChatResponse:
    return ChatResponse(text=text, tool_calls=calls, finish_reason="tool_calls")


def insert_call(name: str, description: str, content: str) -> dict:
    return {
        "function_name": "insert_skill",
        "arguments": {"name": name, "description": description, "content": content},
    }


def update_call(name: str, content: str) -> dict:
    return {"function_name": "update_skill", "arguments": {"name": name, "content": content}}


def delete_call(name: str) -> dict:
    return {"function_name": "delete_skill", "arguments": {"name": name}}


# Scripted 3-task group run: succeed, succeed, fail; insert / insert+update /
# no-op curation; judge scores 4 then 5. Used by the harness tests, the
# golden-trace fixtures, and the acceptance suite.
GOLDEN_GROUP_TASKS = [
    Task(id="g1", text="find the apple"),
    Task(id="g2", text="find the lamp"),
    Task(id="g3", text="find the crate"),
]
GOLDEN_PARAMS = HarnessParams(max_turns=4)


def golden_group_scripts() -> dict[str, list[ChatResponse]]:
    return {
        "executor": [
            text_response("Kitchen first.\nAction: take apple"),
            text_response("SUCCESS"),
            text_response("Lamps are in the hall.\nAction: go hall"),
            text_response("There it is.\nAction: take lamp"),
            text_response("SUCCESS"),
            text_response("Crates sound like cellars.\nAction: go cellar"),
            text_response("Hmm.\nAction: look"),
            text_response("Still nothing.\nAction: look"),
            text_response("Out of ideas.\nAction: look"),
            text_response("FAILURE"),
        ],
        "curator": [
            tool_response(
                "storing what worked",
                insert_call("apple-hunt", "find apples fast", "Check the kitchen first."),
            ),
            tool_response(
                "two edits",
                insert_call("lamp-hunt", "find lamps", "Lamps live in the hall."),
                update_call("apple-hunt", "Check the kitchen counter first."),
            ),
            text_response("nothing durable to add"),
        ],
        "judge": [text_response("4"), text_response("5")],
    }


def golden_group_clients(cycle: bool = False) -> Clients:
    provider = ScriptedProvider(golden_group_scripts(), cycle=cycle)
    return Clients(
        gateway=Gateway.single(provider), make_environment=TextMazeEnvironment
    )


# Scripted 5-task stream with hand-computable metrics: usage 2/5, successful
# usage 1/2, coverage 1/2, 0.4 skills per example, op mix (0.5, 0.25, 0.25).
METRICS_STREAM_TASKS = [
    Task(id="t1", text="find the apple", label="pick"),
    Task(id="t2", text="find the lamp", label="look"),
    Task(id="t3", text="find the zebra", label="pick"),
    Task(id="t4", text="catch the zebra now", label="pick"),
    Task(id="t5", text="find the knife", label="look"),
]
METRICS_PARAMS = HarnessParams(max_turns=3)


def metrics_stream_scripts() -> dict[str, list[ChatResponse]]:
    look = text_response("Action: look")
    return {
        "executor": [
            text_response("Action: take apple"),
            text_response("SUCCESS"),
            look, look, look,
            text_response("FAILURE"),
            look, look, look,
            text_response("SUCCESS"),
            look, look, look,
            text_response("FAILURE"),
            text_response("Action: take knife"),
            text_response("SUCCESS"),
        ],
        "curator": [
            tool_response(
                "kitchen note",
                insert_call("zebra-tactics", "spot zebras quickly", "Scan stripes zone zebra."),
            ),
            tool_response(
                "mineral note",
                insert_call("quartz-notes", "quartz mineral notes", "Quartz shelf cellar."),
            ),
            tool_response(
                "refresh", update_call("zebra-tactics", "Scan stripes zone zebra again.")
            ),
            tool_response("prune", delete_call("stale-notes")),
            text_response("nothing to add"),
        ],
        "judge": [text_response("4"), text_response("3"), text_response("5"), text_response("2")],
    }


def metrics_stream_clients() -> Clients:
    provider = ScriptedProvider(metrics_stream_scripts())
    return Clients(gateway=Gateway.single(provider), make_environment=TextMazeEnvironment)


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
