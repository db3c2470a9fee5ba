"""File-backed store of skill documents: parse, validate, persist, count.

A skill is a single Markdown file with a two-key YAML-style frontmatter
(``name``, ``description``) followed by a verbatim Markdown body. The
serializer is canonical: ``parse(serialize(s)) == s`` byte-for-byte.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

DELIMITER = "---"
SLUG_RE = re.compile(r"^[a-z0-9_-]+$")

TokenCounter = Callable[[str], int]


def count_tokens(text: str) -> int:
    """Whitespace-delimited token count (the default, pluggable counter)."""
    return len(text.split())


class SkillStoreError(Exception):
    """Base error for skill parsing and repository I/O."""


class MissingFrontmatter(SkillStoreError):
    pass


class MissingField(SkillStoreError):
    def __init__(self, field: str):
        super().__init__(f"missing or empty frontmatter field: {field}")
        self.field = field


class InvalidSlug(SkillStoreError):
    def __init__(self, name: str):
        super().__init__(f"invalid skill name {name!r}: expected lowercase slug")
        self.name = name


class InvalidDescription(SkillStoreError):
    pass


class DuplicateName(SkillStoreError):
    def __init__(self, name: str):
        super().__init__(f"duplicate skill name: {name}")
        self.name = name


class UnreadableFile(SkillStoreError):
    def __init__(self, path: Path, reason: str):
        super().__init__(f"cannot read {path}: {reason}")
        self.path = path


class ParseError(SkillStoreError):
    def __init__(self, path: Path, cause: SkillStoreError):
        super().__init__(f"cannot parse {path}: {cause}")
        self.path = path
        self.cause = cause


@dataclass(frozen=True)
class Skill:
    """One named skill: slug name, when-to-use description, Markdown body."""

    name: str
    description: str
    body: str = ""

    def __post_init__(self) -> None:
        if not SLUG_RE.match(self.name):
            raise InvalidSlug(self.name)
        if not self.description:
            raise MissingField("description")
        if "\n" in self.description or "\r" in self.description:
            raise InvalidDescription("description must be a single line")
        if self.description != self.description.strip():
            raise InvalidDescription("description must not have surrounding whitespace")


def parse_skill(text: str) -> Skill:
    """Parse a frontmatter-delimited skill document.

    The body is everything after the first closing ``---`` line, verbatim,
    so bodies may themselves contain ``---`` lines (e.g. inside code fences).
    """
    lines = text.split("\n")
    if not lines or lines[0].strip() != DELIMITER:
        raise MissingFrontmatter("document must begin with a '---' line")
    close = None
    for i in range(1, len(lines)):
        if lines[i].strip() == DELIMITER:
            close = i
            break
    if close is None:
        raise MissingFrontmatter("no closing '---' line")

    fields: dict[str, str] = {}
    for raw in lines[1:close]:
        if ":" not in raw:
            continue
        key, value = raw.split(":", 1)
        fields[key.strip()] = value.strip()

    if not fields.get("name"):
        raise MissingField("name")
    if not fields.get("description"):
        raise MissingField("description")

    body = "\n".join(lines[close + 1 :])
    return Skill(name=fields["name"].lower(), description=fields["description"], body=body)


def serialize_skill(skill: Skill) -> str:
    """Canonical writer: fixed key order, LF endings, body verbatim."""
    return f"---\nname: {skill.name}\ndescription: {skill.description}\n---\n{skill.body}"


@dataclass(frozen=True)
class SkillRepo:
    """Immutable snapshot of the skill collection plus a revision counter.

    Mutation happens by constructing a new snapshot (see curation_protocol);
    snapshots are safe to share across concurrent readers.
    """

    skills: Mapping[str, Skill]
    revision: int = 0

    def __post_init__(self) -> None:
        for name, skill in self.skills.items():
            if name != skill.name:
                raise DuplicateName(f"key {name!r} does not match skill name {skill.name!r}")
        if self.revision < 0:
            raise ValueError("revision must be nonnegative")

    @classmethod
    def empty(cls) -> "SkillRepo":
        return cls(skills={})

    @classmethod
    def from_skills(cls, skills: Iterable[Skill], revision: int = 0) -> "SkillRepo":
        out: dict[str, Skill] = {}
        for skill in skills:
            if skill.name in out:
                raise DuplicateName(skill.name)
            out[skill.name] = skill
        return cls(skills=out, revision=revision)

    def __len__(self) -> int:
        return len(self.skills)

    def __contains__(self, name: str) -> bool:
        return name in self.skills

    def __iter__(self) -> Iterator[Skill]:
        for name in self.names():
            yield self.skills[name]

    def names(self) -> tuple[str, ...]:
        """Skill names in canonical (sorted) iteration order."""
        return tuple(sorted(self.skills))

    def get(self, name: str) -> Skill | None:
        return self.skills.get(name)


def load_repo(directory: str | Path) -> SkillRepo:
    """Load every ``<name>.md`` under ``directory`` into a revision-0 repo."""
    directory = Path(directory)
    if not directory.is_dir():
        raise UnreadableFile(directory, "not a directory")
    skills: dict[str, Skill] = {}
    for path in sorted(directory.glob("*.md")):
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise UnreadableFile(path, str(exc)) from exc
        try:
            skill = parse_skill(text)
        except SkillStoreError as exc:
            raise ParseError(path, exc) from exc
        if skill.name in skills:
            raise DuplicateName(skill.name)
        skills[skill.name] = skill
    return SkillRepo(skills=skills)


def save_repo(repo: SkillRepo, directory: str | Path) -> None:
    """Write one ``<name>.md`` per skill; stale ``.md`` files are removed."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    keep = {f"{name}.md" for name in repo.names()}
    for path in directory.glob("*.md"):
        if path.name not in keep:
            path.unlink()
    for skill in repo:
        target = directory / f"{skill.name}.md"
        with open(target, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(serialize_skill(skill))


def repo_token_length(repo: SkillRepo, counter: TokenCounter = count_tokens) -> int:
    """Total token count of the repo, summed over canonical serializations."""
    return sum(counter(serialize_skill(skill)) for skill in repo)
