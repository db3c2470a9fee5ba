"""BM25 retrieval over the skill repository.

Classic Okapi scoring (k1=1.2, b=0.75) with the nonnegative IDF variant
``ln(1 + (N - df + 0.5) / (df + 0.5))`` so common terms can never push a
score below zero. Indexes are immutable; rebuild after repo changes.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping

from .skill_store import Skill, SkillRepo

K1 = 1.2
B = 0.75

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on any non-alphanumeric run."""
    return _TOKEN_RE.findall(text.lower())


def skill_tokens(skill: Skill) -> list[str]:
    """Index view of a skill: name, description, and body tokens."""
    return tokenize(skill.name) + tokenize(skill.description) + tokenize(skill.body)


@dataclass(frozen=True)
class SkillIndex:
    postings: Mapping[str, Mapping[str, int]]  # term -> {skill name -> tf}
    doc_lengths: Mapping[str, int]
    avg_doc_length: float
    corpus_size: int


def build_index(repo: SkillRepo) -> SkillIndex:
    postings: dict[str, dict[str, int]] = {}
    doc_lengths: dict[str, int] = {}
    for skill in repo:
        tokens = skill_tokens(skill)
        doc_lengths[skill.name] = len(tokens)
        for term in tokens:
            bucket = postings.setdefault(term, {})
            bucket[skill.name] = bucket.get(skill.name, 0) + 1
    size = len(repo)
    avg = sum(doc_lengths.values()) / size if size else 0.0
    return SkillIndex(postings=postings, doc_lengths=doc_lengths, avg_doc_length=avg, corpus_size=size)


def idf(corpus_size: int, doc_freq: int) -> float:
    return math.log(1.0 + (corpus_size - doc_freq + 0.5) / (doc_freq + 0.5))


def retrieve(index: SkillIndex, query: str, k: int) -> list[tuple[str, float]]:
    """Top-k skills by BM25 score, zero-score hits excluded.

    Descending score, ties broken by ascending skill name.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    if k == 0 or index.corpus_size == 0:
        return []
    scores: dict[str, float] = {}
    for term in tokenize(query):
        bucket = index.postings.get(term)
        if not bucket:
            continue
        term_idf = idf(index.corpus_size, len(bucket))
        for name, tf in bucket.items():
            norm = K1 * (1.0 - B + B * index.doc_lengths[name] / index.avg_doc_length)
            scores[name] = scores.get(name, 0.0) + term_idf * tf * (K1 + 1.0) / (tf + norm)
    ranked = sorted(
        ((name, score) for name, score in scores.items() if score > 0.0),
        key=lambda item: (-item[1], item[0]),
    )
    return ranked[:k]
