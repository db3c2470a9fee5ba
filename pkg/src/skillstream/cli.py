"""Operator commands: annotate, group, run, repo inspection, reward replay.

Exit codes: 0 success, 1 input/config error, 2 provider error.
"""

from __future__ import annotations

import csv
import json
import logging
import random
from pathlib import Path

import click

from . import stream_harness as sh
from . import task_grouping as tg
from .config import ConfigError, RunConfig, load_config
from .curation_protocol import decision_to_dict
from .model_gateway import (
    CachingEmbedder,
    Embedder,
    FixtureMiss,
    Gateway,
    GatewayError,
    HttpEmbedder,
    HttpProvider,
    ReplayProvider,
    StubEmbedder,
    annotate_task,
)
from .reward_engine import RewardError, RewardWeights, composite_reward
from .skill_store import (
    SkillStoreError,
    load_repo,
    parse_skill,
    serialize_skill,
)

logger = logging.getLogger(__name__)

EXIT_INPUT = 1
EXIT_PROVIDER = 2


class CliError(click.ClickException):
    def __init__(self, message: str, exit_code: int = EXIT_INPUT):
        super().__init__(message)
        self.exit_code = exit_code


def _provider_error(exc: Exception) -> CliError:
    return CliError(str(exc), exit_code=EXIT_PROVIDER)


def _config(path: str | None) -> RunConfig:
    try:
        return load_config(path)
    except ConfigError as exc:
        raise CliError(str(exc))


def _gateway(cfg: RunConfig) -> Gateway:
    providers = {}
    replay_cache: dict[str, ReplayProvider] = {}
    for role in ("executor", "curator", "judge", "annotator"):
        pc = getattr(cfg.providers, role)
        if pc.kind == "http":
            if not pc.base_url:
                raise CliError(f"providers.{role}: http provider needs a base_url")
            providers[role] = HttpProvider(
                pc.base_url,
                model=pc.model,
                api_key=pc.api_key(),
                timeout=pc.timeout,
                retries=pc.retries,
            )
        elif pc.kind == "replay":
            fixtures = cfg.paths.fixtures
            if not fixtures:
                raise CliError(f"providers.{role}: replay provider needs paths.fixtures")
            if fixtures not in replay_cache:
                if not Path(fixtures).is_file():
                    raise CliError(f"fixtures file not found: {fixtures}")
                replay_cache[fixtures] = ReplayProvider.from_jsonl(fixtures)
            providers[role] = replay_cache[fixtures]
        else:
            raise CliError(f"providers.{role}: unknown provider kind {pc.kind!r}")
    return Gateway(providers)


def _embedder(cfg: RunConfig) -> Embedder:
    ec = cfg.providers.embedder
    if ec.kind == "http":
        if not ec.base_url:
            raise CliError("providers.embedder: http embedder needs a base_url")
        return CachingEmbedder(HttpEmbedder(ec.base_url))
    if ec.kind == "stub":
        return CachingEmbedder(StubEmbedder(dim=ec.dim))
    raise CliError(f"providers.embedder: unknown embedder kind {ec.kind!r}")


def _clients(cfg: RunConfig) -> sh.Clients:
    env = cfg.harness.environment
    if env == "maze":
        factory = sh.TextMazeEnvironment
    elif env == "echo":
        factory = sh.EchoEnvironment
    else:
        raise CliError(f"harness.environment: unknown environment {env!r}")
    return sh.Clients(gateway=_gateway(cfg), make_environment=factory)


def _harness_params(cfg: RunConfig) -> sh.HarnessParams:
    return sh.HarnessParams(
        top_k=cfg.retrieval.top_k,
        max_turns=cfg.harness.max_turns,
        action_history=cfg.harness.action_history,
        rollout_group_size=cfg.harness.rollout_group_size,
        use_env_success=cfg.harness.use_env_success,
        empty_decision_judge=cfg.reward.empty_decision_judge,
        clamp_compression=cfg.reward.clamp_compression,
        weights=cfg.reward.weights(),
        prompt_flavor=cfg.harness.prompt_flavor,
        prompts_dir=cfg.paths.prompts or None,
    )


@click.group()
@click.version_option(package_name="skillstream")
def main() -> None:
    """Skill curation toolkit: repositories, grouping, rollouts, metrics."""
    logging.basicConfig(level=logging.WARNING)


@main.command()
@click.argument("corpus_in", type=click.Path(exists=True, dir_okay=False))
@click.argument("corpus_out", type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--rejects", type=click.Path(dir_okay=False), default=None,
              help="Where to write invalid annotations (default: <out>.rejects).")
def annotate(corpus_in: str, corpus_out: str, config_path: str | None, rejects: str | None) -> None:
    """Annotate tasks with the five attribute lists; resumable by task id."""
    cfg = _config(config_path)
    gateway = _gateway(cfg)
    rejects_path = Path(rejects) if rejects else Path(corpus_out + ".rejects")

    done: set[str] = set()
    out_path = Path(corpus_out)
    if out_path.exists():
        with open(out_path, encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    done.add(str(json.loads(line)["id"]))

    annotated = skipped = rejected = 0
    with open(corpus_in, encoding="utf-8") as src, \
            open(out_path, "a", encoding="utf-8", newline="\n") as out, \
            open(rejects_path, "a", encoding="utf-8", newline="\n") as rej:
        for line_no, line in enumerate(src, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            if "id" not in record or "text" not in record:
                raise CliError(f"{corpus_in}:{line_no}: task record needs id and text")
            task_id = str(record["id"])
            if task_id in done:
                skipped += 1
                continue
            try:
                raw = annotate_task(gateway, record["text"], cfg.paths.prompts or None)
            except (FixtureMiss, GatewayError) as exc:
                raise _provider_error(exc)
            try:
                attributes = tg.validate_annotation(raw)
            except tg.GroupingError as exc:
                rejected += 1
                rej.write(json.dumps({"id": task_id, "error": str(exc), "raw": raw}) + "\n")
                logger.warning("rejected annotation for %s: %s", task_id, exc)
                continue
            task = tg.AnnotatedTask(
                id=task_id,
                text=record["text"],
                attributes=attributes,
                difficulty=record.get("difficulty"),
                label=record.get("label"),
            )
            out.write(json.dumps(tg.task_to_dict(task), sort_keys=True) + "\n")
            annotated += 1
    click.echo(f"annotated {annotated}, skipped {skipped} already done, rejected {rejected}")


@main.command()
@click.argument("corpus", type=click.Path(exists=True, dir_okay=False))
@click.argument("out", type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--by-label", is_flag=True, help="Partition by the task label field instead.")
@click.option("--size", type=int, default=None, help="Target group length.")
@click.option("--size-min", type=int, default=None)
@click.option("--size-max", type=int, default=None)
@click.option("--seed", type=int, default=0)
def group(
    corpus: str,
    out: str,
    config_path: str | None,
    by_label: bool,
    size: int | None,
    size_min: int | None,
    size_max: int | None,
    seed: int,
) -> None:
    """Build related-task groups from an annotated corpus."""
    cfg = _config(config_path)
    if by_label:
        tasks = sh.load_tasks(corpus)
        try:
            partition = tg.group_by_label([(t.id, t.label) for t in tasks])
        except tg.UnlabeledTask as exc:
            raise CliError(str(exc))
        groups = [
            tg.TaskGroup(task_ids=tuple(ids), tags=("label",) * (len(ids) - 1),
                         modes=() if len(ids) < 2 else ("",) * (len(ids) - 1),
                         group_id=f"g{idx:04d}")
            for idx, (label, ids) in enumerate(sorted(partition.items()))
        ]
        tg.save_groups(groups, out)
        click.echo(f"wrote {len(groups)} label groups to {out}")
        return

    try:
        loaded = tg.load_corpus(corpus)
    except tg.GroupingError as exc:
        raise CliError(str(exc))
    params = cfg.grouping.params()
    length_range = (
        (size_min, size_max)
        if size_min is not None and size_max is not None
        else cfg.grouping.length_range()
    )
    length = size if size is not None else cfg.grouping.group_size
    rng = random.Random(seed)
    try:
        groups, leftovers = tg.partition_corpus(
            loaded, params, _embedder(cfg), rng, length=length, length_range=length_range
        )
    except tg.MissingDifficulty as exc:
        raise CliError(str(exc))
    except tg.EmbedderFailure as exc:
        raise _provider_error(exc)
    tg.save_groups(groups, out)
    click.echo(f"wrote {len(groups)} groups to {out}; {len(leftovers)} tasks left ungrouped")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--groups", "groups_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--stream", "stream_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Task texts for --groups mode.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--rollouts", type=int, default=None, help="Rollouts per group (default from config).")
@click.option("--jobs", type=int, default=None, help="Concurrent rollouts.")
@click.option("--csv", "csv_out", is_flag=True, help="Also write per-position metrics CSV.")
@click.option("--dry-run", is_flag=True, help="Print the resolved config and exit.")
def run(
    config_path: str | None,
    groups_path: str | None,
    stream_path: str | None,
    corpus_path: str | None,
    out_dir: str | None,
    rollouts: int | None,
    jobs: int | None,
    csv_out: bool,
    dry_run: bool,
) -> None:
    """Run grouped rollouts or a task stream; write traces and metrics."""
    cfg = _config(config_path)
    if dry_run:
        click.echo(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return
    if bool(groups_path) == bool(stream_path):
        raise CliError("exactly one of --groups or --stream is required")
    if out_dir is None:
        raise CliError("--out is required")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clients = _clients(cfg)
    params = _harness_params(cfg)

    try:
        if stream_path:
            tasks = sh.load_tasks(stream_path)
            result = sh.run_stream(tasks, clients, params)
            sh.write_stream_trace(result, out / "stream.jsonl")
            with open(out / "metrics.json", "w", encoding="utf-8", newline="\n") as handle:
                json.dump(result.metrics.to_dict(), handle, indent=2, sort_keys=True)
                handle.write("\n")
            if csv_out:
                _write_positions_csv(result.positions, out / "positions.csv")
            click.echo(f"stream of {len(tasks)} tasks done; traces in {out}")
            return

        if not corpus_path:
            raise CliError("--groups mode needs --corpus for task texts")
        tasks_by_id = {t.id: t for t in sh.load_tasks(corpus_path)}
        n = rollouts if rollouts is not None else cfg.harness.rollout_group_size
        worker_count = jobs if jobs is not None else cfg.harness.jobs
        summary = []
        for task_group in tg.load_groups(groups_path):
            missing = [tid for tid in task_group.task_ids if tid not in tasks_by_id]
            if missing:
                raise CliError(f"group {task_group.group_id}: unknown task ids {missing}")
            group_tasks = [tasks_by_id[tid] for tid in task_group.task_ids]
            base_seed = cfg.harness.seed
            result = sh.run_rollout_group(
                group_tasks,
                clients,
                params,
                n_rollouts=n,
                seeds=[base_seed + i for i in range(n)],
                group_id=task_group.group_id,
                jobs=worker_count,
            )
            group_dir = out / (task_group.group_id or "group")
            group_dir.mkdir(parents=True, exist_ok=True)
            for rollout in result.rollouts:
                sh.write_rollout_trace(
                    rollout, group_dir / f"rollout_{rollout.rollout_index:03d}.jsonl"
                )
            with open(group_dir / "advantages.jsonl", "w", encoding="utf-8", newline="\n") as handle:
                for record in result.advantage_records():
                    handle.write(sh.canonical_json(record) + "\n")
            summary.append(
                {
                    "group_id": task_group.group_id,
                    "rollouts": n,
                    "rewards": [r.reward.total for r in result.rollouts],
                    "advantages": list(result.advantages),
                }
            )
        with open(out / "summary.json", "w", encoding="utf-8", newline="\n") as handle:
            json.dump(summary, handle, indent=2, sort_keys=True)
            handle.write("\n")
        click.echo(f"ran {len(summary)} group(s); traces in {out}")
    except (sh.GroupRunError, GatewayError) as exc:
        raise _provider_error(exc)
    except (sh.HarnessError, RewardError) as exc:
        raise CliError(str(exc))


def _write_positions_csv(positions, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["position", "task_id", "success", "steps", "retrieved", "inserts", "updates",
             "deletes", "validity", "judge_score", "repo_tokens", "context_tokens"]
        )
        for p in positions:
            ops = [o["op"] for o in (decision_to_dict(p.decision)["ops"])]
            writer.writerow(
                [p.position, p.task_id, int(p.record.success), p.trajectory.step_count,
                 len(p.retrieved), ops.count("insert"), ops.count("update"),
                 ops.count("delete"), p.record.validity, p.record.judge_score,
                 p.record.repo_tokens, p.record.context_tokens]
            )


@main.group()
def repo() -> None:
    """Inspect an on-disk skill repository."""


@repo.command("list")
@click.argument("repo_dir", type=click.Path(exists=True, file_okay=False))
def repo_list(repo_dir: str) -> None:
    """List skill names, sorted."""
    try:
        loaded = load_repo(repo_dir)
    except SkillStoreError as exc:
        raise CliError(str(exc))
    for name in loaded.names():
        click.echo(name)


@repo.command("show")
@click.argument("repo_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("name")
def repo_show(repo_dir: str, name: str) -> None:
    """Render one skill in canonical form."""
    try:
        loaded = load_repo(repo_dir)
    except SkillStoreError as exc:
        raise CliError(str(exc))
    skill = loaded.get(name)
    if skill is None:
        raise CliError(f"no skill named {name!r} in {repo_dir}")
    click.echo(serialize_skill(skill), nl=False)
    click.echo()


@repo.command("validate")
@click.argument("repo_dir", type=click.Path(exists=True, file_okay=False))
def repo_validate(repo_dir: str) -> None:
    """Check every skill file; print problems and exit nonzero on any."""
    problems = []
    seen: dict[str, str] = {}
    for path in sorted(Path(repo_dir).glob("*.md")):
        try:
            skill = parse_skill(path.read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError, SkillStoreError) as exc:
            problems.append(f"{path.name}: {exc}")
            continue
        if skill.name in seen:
            problems.append(
                f"{path.name}: duplicate name {skill.name!r} (also in {seen[skill.name]})"
            )
        else:
            seen[skill.name] = path.name
    if problems:
        for problem in problems:
            click.echo(problem, err=True)
        raise CliError(f"{len(problems)} problem(s) found in {repo_dir}")
    click.echo(f"ok: {len(seen)} skill(s) valid")


@main.command("reward-replay")
@click.argument("trace", type=click.Path(exists=True, dir_okay=False))
@click.option("--lambda-f", type=float, default=None)
@click.option("--lambda-u", type=float, default=None)
@click.option("--lambda-c", type=float, default=None)
@click.option("--no-clamp", is_flag=True, help="Disable compression clamping.")
@click.option("--check", is_flag=True, help="Fail unless recomputed totals match stored ones.")
def reward_replay(
    trace: str,
    lambda_f: float | None,
    lambda_u: float | None,
    lambda_c: float | None,
    no_clamp: bool,
    check: bool,
) -> None:
    """Recompute the reward breakdown offline from a trace file."""
    try:
        replay = sh.read_trace(trace)
    except sh.HarnessError as exc:
        raise CliError(str(exc))
    stored = replay.stored
    base = stored.weights if stored is not None else RewardWeights()
    weights = RewardWeights(
        lambda_f=base.lambda_f if lambda_f is None else lambda_f,
        lambda_u=base.lambda_u if lambda_u is None else lambda_u,
        lambda_c=base.lambda_c if lambda_c is None else lambda_c,
    )
    try:
        recomputed = composite_reward(replay.records, weights, clamp=not no_clamp)
    except RewardError as exc:
        raise CliError(str(exc))
    report = {
        "recomputed": recomputed.to_dict(),
        "stored": stored.to_dict() if stored is not None else None,
        "positions": len(replay.records),
    }
    click.echo(json.dumps(report, indent=2, sort_keys=True))
    if check:
        if stored is None:
            raise CliError("trace has no stored reward record to check against")
        same_weights = stored.weights == weights
        if same_weights and recomputed != stored:
            raise CliError("recomputed breakdown does not match the stored one")
        if not same_weights and (
            recomputed.r_task != stored.r_task
            or recomputed.r_fc != stored.r_fc
            or recomputed.r_cnt != stored.r_cnt
            or recomputed.r_comp != stored.r_comp
        ):
            raise CliError("recomputed components do not match the stored ones")


if __name__ == "__main__":
    main()
