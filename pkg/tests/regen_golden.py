"""Regenerate the frozen test data under tests/data/.

Run from the repository root after an intentional behavior change:

    python tests/regen_golden.py

Rewrites the toy grouping corpus and its golden partition, the end-to-end
replay fixtures, and the golden rollout trace. Inspect diffs before
committing: these files are the byte-level contract the acceptance suite
checks against.
"""

from __future__ import annotations

import json
import random
from conftest import DATA_DIR, GOLDEN_GROUP_TASKS, GOLDEN_PARAMS, golden_group_scripts

from skillstream.model_gateway import (
    Gateway,
    RecordingProvider,
    ScriptedProvider,
    StubEmbedder,
    write_fixtures,
)
from skillstream.stream_harness import Clients, TextMazeEnvironment, run_group, write_rollout_trace
from skillstream.task_grouping import (
    AnnotatedTask,
    AttributeSet,
    GroupingParams,
    partition_corpus,
    save_groups,
    task_to_dict,
)

TOPICS = ["number theory", "combinatorics", "graph theory", "algebra"]
SKILLS = ["algebraic manipulation", "case analysis", "bounding", "proof writing", "pattern spotting"]
CONCEPTS = [
    "modular arithmetic",
    "prime factorization",
    "induction",
    "recurrences",
    "graph coloring",
    "counting argument",
    "generating functions",
    "invariants",
]
STRATEGIES = ["work backwards", "small cases", "symmetry", "extremal principle"]
PITFALLS = ["off by one", "sign error", "overcounting", "circular reasoning"]

TOY_CORPUS_GEN_SEED = 0
TOY_PARTITION_SEED = 2
TOY_GROUP_LENGTH = 5


def build_toy_corpus(seed: int = TOY_CORPUS_GEN_SEED, n: int = 20) -> dict[str, AnnotatedTask]:
    rng = random.Random(seed)
    corpus: dict[str, AnnotatedTask] = {}
    for i in range(n):
        tid = f"task{i:02d}"
        attrs = AttributeSet(
            topics=tuple(rng.sample(TOPICS, rng.randint(1, 2))),
            skills=tuple(rng.sample(SKILLS, 2)),
            concepts=tuple(rng.sample(CONCEPTS, rng.randint(2, 3))),
            strategies=tuple(rng.sample(STRATEGIES, rng.randint(1, 2))),
            pitfalls=tuple(rng.sample(PITFALLS, rng.randint(1, 2))),
        )
        corpus[tid] = AnnotatedTask(
            id=tid,
            text=f"practice problem {i:02d} on {attrs.concepts[0]}",
            attributes=attrs,
            difficulty=round(rng.uniform(1.0, 6.0), 2),
        )
    return corpus


def write_toy_data() -> None:
    corpus = build_toy_corpus()
    with open(DATA_DIR / "toy_corpus.jsonl", "w", encoding="utf-8", newline="\n") as handle:
        for task in corpus.values():
            handle.write(json.dumps(task_to_dict(task), sort_keys=True) + "\n")
    groups, leftovers = partition_corpus(
        corpus,
        GroupingParams(),
        StubEmbedder(),
        random.Random(TOY_PARTITION_SEED),
        length=TOY_GROUP_LENGTH,
    )
    save_groups(groups, DATA_DIR / "toy_groups_golden.jsonl")
    print(f"toy corpus: {len(corpus)} tasks, {len(groups)} groups, {len(leftovers)} leftovers")


def write_e2e_data() -> None:
    recorder = RecordingProvider(ScriptedProvider(golden_group_scripts()))
    clients = Clients(gateway=Gateway.single(recorder), make_environment=TextMazeEnvironment)
    rollout = run_group(
        GOLDEN_GROUP_TASKS, clients, GOLDEN_PARAMS, seed=0, group_id="g0000", rollout_index=0
    )
    write_fixtures(DATA_DIR / "e2e_fixtures.jsonl", recorder.entries)
    write_rollout_trace(rollout, DATA_DIR / "golden_rollout.jsonl")
    with open(DATA_DIR / "e2e_corpus.jsonl", "w", encoding="utf-8", newline="\n") as handle:
        for task in GOLDEN_GROUP_TASKS:
            handle.write(json.dumps({"id": task.id, "text": task.text}, sort_keys=True) + "\n")
    with open(DATA_DIR / "e2e_groups.jsonl", "w", encoding="utf-8", newline="\n") as handle:
        record = {"group_id": "g0000", "task_ids": [t.id for t in GOLDEN_GROUP_TASKS]}
        handle.write(json.dumps(record, sort_keys=True) + "\n")
    print(f"e2e fixtures: {len(recorder.entries)} entries")
    print("reward:", json.dumps(rollout.reward.to_dict(), sort_keys=True))
    print("context tokens:", [p.record.context_tokens for p in rollout.positions])
    print("repo tokens:", [p.record.repo_tokens for p in rollout.positions])


if __name__ == "__main__":
    DATA_DIR.mkdir(exist_ok=True)
    write_toy_data()
    write_e2e_data()
