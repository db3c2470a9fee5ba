"""Run configuration: one declarative YAML document, sections per module.

Every tuned default lives here so a run can be reproduced from the archived
config alone. File values override defaults; command-line flags override
file values; environment variables are only consulted for secrets.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .reward_engine import RewardWeights
from .task_grouping import GroupingParams


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class RewardConfig:
    lambda_f: float = 1.0
    lambda_u: float = 0.1
    lambda_c: float = 0.05
    clamp_compression: bool = True
    empty_decision_judge: float = 0.5

    def weights(self) -> RewardWeights:
        return RewardWeights(lambda_f=self.lambda_f, lambda_u=self.lambda_u, lambda_c=self.lambda_c)


@dataclass(frozen=True)
class RetrievalConfig:
    top_k: int = 5


@dataclass(frozen=True)
class HarnessConfig:
    max_turns: int = 30
    action_history: int = 3
    rollout_group_size: int = 8
    use_env_success: bool = False
    prompt_flavor: str = "agentic"
    environment: str = "maze"  # maze | echo
    seed: int = 0
    jobs: int = 1


@dataclass(frozen=True)
class GroupingConfig(GroupingParams):
    group_size: int = 10
    group_size_min: int | None = None
    group_size_max: int | None = None

    def params(self) -> GroupingParams:
        names = [f.name for f in fields(GroupingParams)]
        return GroupingParams(**{name: getattr(self, name) for name in names})

    def length_range(self) -> tuple[int, int] | None:
        if self.group_size_min is not None and self.group_size_max is not None:
            return (self.group_size_min, self.group_size_max)
        return None


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "replay"  # replay | http
    base_url: str = ""
    model: str = ""
    api_key_env: str = ""
    timeout: float = 60.0
    retries: int = 2

    def api_key(self) -> str | None:
        return os.environ.get(self.api_key_env) if self.api_key_env else None


@dataclass(frozen=True)
class EmbedderConfig:
    kind: str = "stub"  # stub | http
    base_url: str = ""
    dim: int = 384


@dataclass(frozen=True)
class ProvidersConfig:
    executor: ProviderConfig = field(default_factory=ProviderConfig)
    curator: ProviderConfig = field(default_factory=ProviderConfig)
    judge: ProviderConfig = field(default_factory=ProviderConfig)
    annotator: ProviderConfig = field(default_factory=ProviderConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)


@dataclass(frozen=True)
class PathsConfig:
    corpus: str = ""
    repo_dir: str = ""
    trace_dir: str = ""
    fixtures: str = ""
    prompts: str = ""


@dataclass(frozen=True)
class RunConfig:
    reward: RewardConfig = field(default_factory=RewardConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    providers: ProvidersConfig = field(default_factory=ProvidersConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTION_TYPES = {
    "reward": RewardConfig,
    "retrieval": RetrievalConfig,
    "harness": HarnessConfig,
    "grouping": GroupingConfig,
    "paths": PathsConfig,
}


def _build(cls: type, data: Mapping[str, Any], where: str) -> Any:
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value in {where}: {exc}") from exc


def _build_providers(data: Mapping[str, Any]) -> ProvidersConfig:
    allowed = {f.name for f in fields(ProvidersConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in providers: {', '.join(sorted(unknown))}")
    kwargs: dict[str, Any] = {}
    for name in data:
        section = data[name]
        if not isinstance(section, Mapping):
            raise ConfigError(f"providers.{name} must be a mapping")
        cls = EmbedderConfig if name == "embedder" else ProviderConfig
        kwargs[name] = _build(cls, section, f"providers.{name}")
    return ProvidersConfig(**kwargs)


def load_config(path: str | Path | None = None) -> RunConfig:
    """Defaults, overlaid with the YAML file at ``path`` when given."""
    if path is None:
        return RunConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if raw is None:
        return RunConfig()
    if not isinstance(raw, Mapping):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")

    sections: dict[str, Any] = {}
    for name, value in raw.items():
        if name == "providers":
            sections[name] = _build_providers(value or {})
        elif name in _SECTION_TYPES:
            if not isinstance(value, Mapping):
                raise ConfigError(f"section {name!r} must be a mapping")
            sections[name] = _build(_SECTION_TYPES[name], value, name)
        else:
            raise ConfigError(f"unknown config section: {name!r}")
    return RunConfig(**sections)
