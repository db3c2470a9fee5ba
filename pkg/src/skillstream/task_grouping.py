"""Related-task grouping: attribute validation, soft set similarity, the
six-condition dependency gate, and curriculum-aware group construction.

Tasks carry five phrase-list attribute dimensions (topics, skills,
concepts, strategies, pitfalls) plus a scalar difficulty. Pair similarity
is a soft Jaccard that combines exact phrase matches with greedy
one-to-one fuzzy matches under embedding cosine >= tau. Groups grow by
repeatedly sampling an admissible successor: candidates come from an
inverted index over the dependency dimensions, with a uniform random
fallback pool for pairs that agree semantically but not lexically.
"""

from __future__ import annotations

import json
import math
import random
import string
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .model_gateway import Embedder

DIMENSIONS = ("topics", "skills", "concepts", "strategies", "pitfalls")
MAX_PHRASES_PER_DIMENSION = 5
MAX_WORDS_PER_PHRASE = 5

TAG_INDEXED = "indexed"
TAG_FALLBACK = "fallback"


class GroupingError(Exception):
    pass


class MissingDimension(GroupingError):
    def __init__(self, name: str):
        super().__init__(f"annotation is missing dimension {name!r}")
        self.dimension = name


class PhraseTooLong(GroupingError):
    def __init__(self, phrase: str):
        super().__init__(f"phrase exceeds {MAX_WORDS_PER_PHRASE} words: {phrase!r}")
        self.phrase = phrase


class TooManyPhrases(GroupingError):
    def __init__(self, name: str, count: int):
        super().__init__(
            f"dimension {name!r} has {count} phrases (limit {MAX_PHRASES_PER_DIMENSION})"
        )
        self.dimension = name


class EmbedderFailure(GroupingError):
    pass


class SeedNotInCorpus(GroupingError):
    def __init__(self, task_id: str):
        super().__init__(f"seed task {task_id!r} is not in the corpus")
        self.task_id = task_id


class MissingDifficulty(GroupingError):
    def __init__(self, task_id: str):
        super().__init__(f"task {task_id!r} has no difficulty score")
        self.task_id = task_id


class UnlabeledTask(GroupingError):
    def __init__(self, task_id: str):
        super().__init__(f"task {task_id!r} has no label")
        self.task_id = task_id


class Mode(str, Enum):
    """Curriculum direction sampled per successor draw."""

    UP = "up"
    EQ = "eq"
    DOWN = "down"


@dataclass(frozen=True)
class AttributeSet:
    topics: tuple[str, ...] = ()
    skills: tuple[str, ...] = ()
    concepts: tuple[str, ...] = ()
    strategies: tuple[str, ...] = ()
    pitfalls: tuple[str, ...] = ()

    def dimension(self, name: str) -> tuple[str, ...]:
        return getattr(self, name)


@dataclass(frozen=True)
class AnnotatedTask:
    id: str
    text: str
    attributes: AttributeSet
    difficulty: float | None = 0.0
    label: str | None = None


def _difficulty_of(task: AnnotatedTask) -> float:
    if task.difficulty is None:
        raise MissingDifficulty(task.id)
    return task.difficulty


@dataclass(frozen=True)
class GroupingParams:
    """Stage-2 pipeline knobs; defaults are the adopted values."""

    tau: float = 0.60
    kappa_c: int = 1
    kappa_s: int = 1
    theta_t: float = 0.65
    sigma_min: float = 0.30
    sigma_max: float = 0.85
    delta_min: float = 0.0
    w_concepts: float = 5.0
    w_skills: float = 4.0
    w_strategies: float = 3.0
    w_pitfalls: float = 1.0
    w_topics: float = 2.0
    lambda_bonus: float = 1.0
    p_up: float = 0.80
    p_eq: float = 0.20
    p_down: float = 0.00
    gap_min: float = 0.5
    gap_max: float = 3.0
    delta_eq: float = 0.3
    k_inv: int = 2000
    fallback_pool: int = 200
    encoder: str = "all-MiniLM-L6-v2"

    def __post_init__(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must be in (0, 1)")
        if self.sigma_min >= self.sigma_max:
            raise ValueError("sigma_min must be below sigma_max")
        if self.gap_min >= self.gap_max:
            raise ValueError("gap_min must be below gap_max")
        probs = (self.p_up, self.p_eq, self.p_down)
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError("mode probabilities must be nonnegative and sum to 1")
        weights = self.weights()
        if min(weights.values()) < 0 or sum(weights.values()) <= 0:
            raise ValueError("dimension weights must be nonnegative with a positive sum")
        if self.k_inv < 1 or self.fallback_pool < 1:
            raise ValueError("pool sizes must be positive")

    def weights(self) -> dict[str, float]:
        return {
            "concepts": self.w_concepts,
            "skills": self.w_skills,
            "strategies": self.w_strategies,
            "pitfalls": self.w_pitfalls,
            "topics": self.w_topics,
        }


def validate_annotation(raw: Mapping) -> AttributeSet:
    """Normalize a raw five-list annotation: trim, lowercase, enforce limits."""
    cleaned: dict[str, tuple[str, ...]] = {}
    for name in DIMENSIONS:
        if name not in raw or not isinstance(raw[name], (list, tuple)):
            raise MissingDimension(name)
        phrases = []
        for item in raw[name]:
            if not isinstance(item, str):
                raise MissingDimension(name)
            phrase = " ".join(item.lower().split())
            if not phrase:
                continue
            if len(phrase.split()) > MAX_WORDS_PER_PHRASE:
                raise PhraseTooLong(item)
            phrases.append(phrase)
        if len(phrases) > MAX_PHRASES_PER_DIMENSION:
            raise TooManyPhrases(name, len(phrases))
        cleaned[name] = tuple(phrases)
    return AttributeSet(**cleaned)


def normalize_phrase(phrase: str) -> str:
    """Exact-match key: lowercase, collapsed whitespace, end punctuation stripped."""
    collapsed = " ".join(phrase.lower().split())
    return collapsed.strip(string.punctuation + " ")


def _cosine(u: Sequence[float], v: Sequence[float]) -> float:
    return sum(a * b for a, b in zip(u, v))


def _embed(embedder: Embedder, phrases: Sequence[str]) -> list[tuple[float, ...]]:
    try:
        return list(embedder.embed(list(phrases)).vectors)
    except GroupingError:
        raise
    except Exception as exc:
        raise EmbedderFailure(f"embedder failed: {exc}") from exc


def matched_count(
    a: Sequence[str], b: Sequence[str], tau: float, embedder: Embedder
) -> int:
    """One-to-one matched pairs: exact (normalized) matches first, then greedy
    fuzzy matches in descending cosine order, keeping pairs with cosine >= tau."""
    a_left = list(range(len(a)))
    b_left = list(range(len(b)))
    matches = 0

    b_by_norm: dict[str, list[int]] = {}
    for j in b_left:
        b_by_norm.setdefault(normalize_phrase(b[j]), []).append(j)
    a_remaining = []
    for i in a_left:
        key = normalize_phrase(a[i])
        bucket = b_by_norm.get(key)
        if bucket:
            bucket.pop(0)
            matches += 1
        else:
            a_remaining.append(i)
    b_remaining = [j for bucket in b_by_norm.values() for j in bucket]
    b_remaining.sort()

    if not a_remaining or not b_remaining:
        return matches

    unique = list(dict.fromkeys([a[i] for i in a_remaining] + [b[j] for j in b_remaining]))
    vectors = dict(zip(unique, _embed(embedder, unique)))
    pairs = sorted(
        ((_cosine(vectors[a[i]], vectors[b[j]]), i, j) for i in a_remaining for j in b_remaining),
        key=lambda item: (-item[0], item[1], item[2]),
    )
    used_a: set[int] = set()
    used_b: set[int] = set()
    for cos, i, j in pairs:
        if cos < tau:
            break
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        matches += 1
    return matches


def soft_jaccard(a: Sequence[str], b: Sequence[str], tau: float, embedder: Embedder) -> float:
    """``m / (|A| + |B| - m)``; two empty lists count as identical (1.0)."""
    if not a and not b:
        return 1.0
    m = matched_count(a, b, tau, embedder)
    return m / (len(a) + len(b) - m)


def overall_similarity(
    source: AttributeSet, target: AttributeSet, params: GroupingParams, embedder: Embedder
) -> float:
    """Convex combination of per-dimension soft-Jaccard scores."""
    weights = params.weights()
    total_weight = sum(weights.values())
    return sum(
        (weights[name] / total_weight)
        * soft_jaccard(source.dimension(name), target.dimension(name), params.tau, embedder)
        for name in ("concepts", "skills", "strategies", "pitfalls", "topics")
    )


@dataclass(frozen=True)
class GateOutcome:
    passed: bool
    violations: tuple[int, ...] = ()


def _difficulty_ok(delta: float, params: GroupingParams, mode: Mode | None) -> bool:
    if mode is Mode.UP:
        return params.gap_min <= delta <= params.gap_max
    if mode is Mode.EQ:
        return abs(delta) <= params.delta_eq
    if mode is Mode.DOWN:
        return delta < 0.0
    return delta >= params.delta_min


def dependency_gate(
    source: AnnotatedTask,
    target: AnnotatedTask,
    params: GroupingParams,
    embedder: Embedder,
    mode: Mode | None = None,
) -> GateOutcome:
    """Admissibility of appending ``target`` after ``source``.

    Conditions: (1) shared concept and skill foundations, (2) shared
    reasoning machinery (strategies or pitfalls), (3) not a near-duplicate,
    (4) not too unrelated, (5) the target introduces something new, and
    (6) the difficulty step fits the active curriculum mode (or the plain
    difficulty floor when no mode is given). All violations are reported.
    """
    s, t = source.attributes, target.attributes
    tau = params.tau
    m_concepts = matched_count(s.concepts, t.concepts, tau, embedder)
    m_skills = matched_count(s.skills, t.skills, tau, embedder)
    m_strategies = matched_count(s.strategies, t.strategies, tau, embedder)
    m_pitfalls = matched_count(s.pitfalls, t.pitfalls, tau, embedder)
    sj_topics = soft_jaccard(s.topics, t.topics, tau, embedder)
    omega = overall_similarity(s, t, params, embedder)

    violations = []
    if not (m_concepts >= params.kappa_c and m_skills >= params.kappa_s):
        violations.append(1)
    if m_strategies + m_pitfalls < 1:
        violations.append(2)
    if not (sj_topics <= params.theta_t and omega <= params.sigma_max):
        violations.append(3)
    if omega < params.sigma_min:
        violations.append(4)
    if not (len(t.concepts) > m_concepts or len(t.skills) > m_skills):
        violations.append(5)
    if not _difficulty_ok(_difficulty_of(target) - _difficulty_of(source), params, mode):
        violations.append(6)
    return GateOutcome(passed=not violations, violations=tuple(violations))


def difficulty_bonus(d_source: float, d_target: float, gap_min: float, gap_max: float) -> float:
    """Triangular bump over the forward-gap range: 1 at the midpoint, 0 at the
    edges and outside."""
    if gap_min >= gap_max:
        raise ValueError("gap_min must be below gap_max")
    delta = d_target - d_source
    if delta <= gap_min or delta >= gap_max:
        return 0.0
    mid = (gap_min + gap_max) / 2.0
    if delta <= mid:
        return (delta - gap_min) / (mid - gap_min)
    return (gap_max - delta) / (gap_max - mid)


def pair_score(
    source: AnnotatedTask, target: AnnotatedTask, params: GroupingParams, embedder: Embedder
) -> float:
    """Raw-weight soft-Jaccard sum plus the weighted difficulty bonus."""
    weights = params.weights()
    tau = params.tau
    s, t = source.attributes, target.attributes
    score = sum(
        weights[name] * soft_jaccard(s.dimension(name), t.dimension(name), tau, embedder)
        for name in ("concepts", "skills", "strategies", "pitfalls", "topics")
    )
    bonus = difficulty_bonus(
        _difficulty_of(source), _difficulty_of(target), params.gap_min, params.gap_max
    )
    return score + params.lambda_bonus * bonus


# --- candidate retrieval and group construction ------------------------------

# Retrieval routes through the dependency dimensions only; topics and skills
# are excluded so groups do not collapse onto one narrow subject.
INDEX_DIMENSIONS = ("concepts", "strategies", "pitfalls")


def build_inverted_index(corpus: Mapping[str, AnnotatedTask]) -> dict[str, tuple[str, ...]]:
    """Normalized dependency phrase -> task ids, in corpus order."""
    postings: dict[str, list[str]] = {}
    for task_id, task in corpus.items():
        seen: set[str] = set()
        for name in INDEX_DIMENSIONS:
            for phrase in task.attributes.dimension(name):
                key = normalize_phrase(phrase)
                if key and key not in seen:
                    seen.add(key)
                    postings.setdefault(key, []).append(task_id)
    return {key: tuple(ids) for key, ids in postings.items()}


def candidate_pool(
    source_id: str,
    corpus: Mapping[str, AnnotatedTask],
    index: Mapping[str, Sequence[str]],
    exclude: frozenset[str] = frozenset(),
) -> list[str]:
    """Union of the source's dependency-phrase postings, minus self/excluded."""
    source = corpus[source_id]
    pool: dict[str, None] = {}
    for name in INDEX_DIMENSIONS:
        for phrase in source.attributes.dimension(name):
            for task_id in index.get(normalize_phrase(phrase), ()):
                if task_id != source_id and task_id not in exclude:
                    pool[task_id] = None
    return list(pool)


def sample_mode(params: GroupingParams, rng: random.Random) -> Mode:
    draw = rng.random()
    if draw < params.p_up:
        return Mode.UP
    if draw < params.p_up + params.p_eq:
        return Mode.EQ
    return Mode.DOWN


@dataclass(frozen=True)
class SuccessorPick:
    task_id: str
    tag: str  # indexed | fallback
    mode: Mode


def _best_candidate(
    source: AnnotatedTask,
    pool: Iterable[str],
    corpus: Mapping[str, AnnotatedTask],
    params: GroupingParams,
    embedder: Embedder,
    mode: Mode,
) -> str | None:
    best_id: str | None = None
    best_score = -math.inf
    for task_id in sorted(pool):
        target = corpus[task_id]
        if not dependency_gate(source, target, params, embedder, mode).passed:
            continue
        score = pair_score(source, target, params, embedder)
        if score > best_score:
            best_score = score
            best_id = task_id
    return best_id


def sample_successor(
    source_id: str,
    corpus: Mapping[str, AnnotatedTask],
    params: GroupingParams,
    embedder: Embedder,
    rng: random.Random,
    exclude: frozenset[str] = frozenset(),
    index: Mapping[str, Sequence[str]] | None = None,
) -> SuccessorPick | None:
    """One admissible successor for ``source_id``, or None.

    Draw order is fixed for reproducibility: curriculum mode, then (when the
    indexed pool overflows) the subsample, then (when nothing indexed passes)
    the fallback pool. Ties in score break toward the ascending task id.
    """
    if source_id not in corpus:
        raise SeedNotInCorpus(source_id)
    if index is None:
        index = build_inverted_index(corpus)
    source = corpus[source_id]
    mode = sample_mode(params, rng)

    pool = candidate_pool(source_id, corpus, index, exclude)
    if len(pool) > params.k_inv:
        pool = rng.sample(pool, params.k_inv)
    best = _best_candidate(source, pool, corpus, params, embedder, mode)
    if best is not None:
        return SuccessorPick(task_id=best, tag=TAG_INDEXED, mode=mode)

    eligible = [tid for tid in corpus if tid != source_id and tid not in exclude]
    fallback = (
        rng.sample(eligible, params.fallback_pool)
        if len(eligible) > params.fallback_pool
        else eligible
    )
    best = _best_candidate(source, fallback, corpus, params, embedder, mode)
    if best is not None:
        return SuccessorPick(task_id=best, tag=TAG_FALLBACK, mode=mode)
    return None


@dataclass(frozen=True)
class TaskGroup:
    """Ordered related tasks; tags/modes record how each extension was sourced."""

    task_ids: tuple[str, ...]
    tags: tuple[str, ...] = ()
    modes: tuple[str, ...] = ()
    group_id: str = ""

    def __post_init__(self) -> None:
        if len(set(self.task_ids)) != len(self.task_ids):
            raise ValueError("task ids within a group must be distinct")
        # tags may be absent entirely (externally authored group files)
        if self.tags and len(self.tags) != len(self.task_ids) - 1:
            raise ValueError("one tag per extension expected")

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "task_ids": list(self.task_ids),
            "tags": list(self.tags),
            "modes": list(self.modes),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TaskGroup":
        return cls(
            task_ids=tuple(data["task_ids"]),
            tags=tuple(data.get("tags", ())),
            modes=tuple(data.get("modes", ())),
            group_id=data.get("group_id", ""),
        )


def build_group(
    seed_id: str,
    length: int,
    corpus: Mapping[str, AnnotatedTask],
    params: GroupingParams,
    embedder: Embedder,
    rng: random.Random,
    exclude: frozenset[str] = frozenset(),
    index: Mapping[str, Sequence[str]] | None = None,
    group_id: str = "",
) -> TaskGroup:
    """Grow a group from a seed by iterating the successor sampler with a
    growing exclusion set; stops early when no candidate passes."""
    if length < 2:
        raise ValueError("target group length must be at least 2")
    if seed_id not in corpus:
        raise SeedNotInCorpus(seed_id)
    if index is None:
        index = build_inverted_index(corpus)
    members = [seed_id]
    tags: list[str] = []
    modes: list[str] = []
    taken = set(exclude) | {seed_id}
    while len(members) < length:
        pick = sample_successor(
            members[-1], corpus, params, embedder, rng, exclude=frozenset(taken), index=index
        )
        if pick is None:
            break
        members.append(pick.task_id)
        tags.append(pick.tag)
        modes.append(pick.mode.value)
        taken.add(pick.task_id)
    return TaskGroup(
        task_ids=tuple(members), tags=tuple(tags), modes=tuple(modes), group_id=group_id
    )


def partition_corpus(
    corpus: Mapping[str, AnnotatedTask],
    params: GroupingParams,
    embedder: Embedder,
    rng: random.Random,
    length: int = 10,
    length_range: tuple[int, int] | None = None,
    min_size: int = 2,
) -> tuple[list[TaskGroup], list[str]]:
    """Partition the corpus into groups, seeding round-robin over tasks that
    are not yet grouped. Returns the groups and any leftover task ids."""
    index = build_inverted_index(corpus)
    grouped: set[str] = set()
    tried: set[str] = set()
    groups: list[TaskGroup] = []
    while True:
        seed_id = next((tid for tid in corpus if tid not in grouped and tid not in tried), None)
        if seed_id is None:
            break
        target = rng.randint(*length_range) if length_range else length
        group = build_group(
            seed_id,
            max(target, min_size),
            corpus,
            params,
            embedder,
            rng,
            exclude=frozenset(grouped),
            index=index,
            group_id=f"g{len(groups):04d}",
        )
        if len(group.task_ids) >= min_size:
            groups.append(group)
            grouped.update(group.task_ids)
        else:
            tried.add(seed_id)
    return groups, [tid for tid in corpus if tid not in grouped]


def group_by_label(tasks: Iterable[tuple[str, str | None]]) -> dict[str, list[str]]:
    """Partition by categorical label, order-preserving within each label."""
    groups: dict[str, list[str]] = {}
    for task_id, label in tasks:
        if not label:
            raise UnlabeledTask(task_id)
        groups.setdefault(label, []).append(task_id)
    return groups


# --- corpus I/O ---------------------------------------------------------------


def task_to_dict(task: AnnotatedTask) -> dict:
    record = {
        "id": task.id,
        "text": task.text,
        "difficulty": task.difficulty,
        "topics": list(task.attributes.topics),
        "skills": list(task.attributes.skills),
        "concepts": list(task.attributes.concepts),
        "strategies": list(task.attributes.strategies),
        "pitfalls": list(task.attributes.pitfalls),
    }
    if task.label is not None:
        record["label"] = task.label
    return record


def task_from_dict(record: Mapping) -> AnnotatedTask:
    attributes = validate_annotation(record)
    difficulty = record.get("difficulty")
    return AnnotatedTask(
        id=str(record["id"]),
        text=record.get("text", ""),
        attributes=attributes,
        difficulty=float(difficulty) if difficulty is not None else None,
        label=record.get("label"),
    )


def load_corpus(path: str | Path) -> dict[str, AnnotatedTask]:
    """Read an annotated-task JSONL file into an ordered id -> task map."""
    corpus: dict[str, AnnotatedTask] = {}
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            task = task_from_dict(record)
            if task.id in corpus:
                raise GroupingError(f"duplicate task id {task.id!r} at line {line_no}")
            corpus[task.id] = task
    return corpus


def save_groups(groups: Iterable[TaskGroup], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for group in groups:
            handle.write(json.dumps(group.to_dict(), sort_keys=True) + "\n")


def load_groups(path: str | Path) -> list[TaskGroup]:
    groups = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                groups.append(TaskGroup.from_dict(json.loads(line)))
    return groups
