"""Command-line entry point.

Subcommands cover the whole pipeline: synthetic task generation, corpus
ingestion, rollouts, reward scoring, evaluation, fixed-depth probes, the
reward-curve table, PPO training, and reporting. Configuration merges
three layers (defaults, then an optional JSON config file, then explicit
flags) and a resolved copy is written next to every output file for
provenance.

Exit codes: 0 success, 2 usage or configuration error, 3 data or schema
error, 4 remote transport error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import __version__
from .env import EpisodeConfig, oracle_retriever_for, probe_fixed_depth, run_dataset
from .errors import ProtocolError, SchemaError, TransportError, UsageError
from .metrics import MetricsReport, aggregate_metrics
from .policy import (
    ParametricTextPolicy,
    RemotePolicy,
    ScriptedCapability,
    ScriptedPolicy,
)
from .retrieval import ingest_corpus
from .rewards import (
    ABLATABLE_COMPONENTS,
    RewardConstants,
    classify_steps,
    cumulative_reward_curve,
    score_trajectory,
)
from .tasks import generate_tasks, load_tasks, write_task_files
from .training import (
    EnvSpec,
    ParametricPolicy,
    TrainerConfig,
    config_hash,
    train,
)
from .trajectory import read_dataset, read_trajectories, write_trajectories

_EXIT_USAGE = 2
_EXIT_DATA = 3
_EXIT_TRANSPORT = 4


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as handle:
            obj = json.load(handle)
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError("config file must hold a JSON object")
    return obj


def _merge(defaults: dict, file_section: dict, flags: dict) -> dict:
    merged = dict(defaults)
    merged.update({k: v for k, v in file_section.items() if v is not None})
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


def _write_provenance(out_path: str, command: str, resolved: dict) -> None:
    path = Path(str(out_path) + ".config.json")
    payload = {"command": command, "config": resolved}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _reward_constants(file_config: dict) -> RewardConstants:
    section = file_config.get("rewards", {})
    try:
        return RewardConstants.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad reward constants: {exc}") from exc


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"{flag} expects a comma-separated integer list") from exc


def _episode_config(file_config: dict, args) -> EpisodeConfig:
    flags = {
        "max_turns": args.max_turns,
        "k": args.k,
        "fixed_depth": getattr(args, "fixed_depth", None),
    }
    merged = _merge(EpisodeConfig().to_dict(), file_config.get("episode", {}), flags)
    try:
        return EpisodeConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad episode config: {exc}") from exc


def _build_backend(args, config: EpisodeConfig):
    if args.policy == "scripted":
        capability = ScriptedCapability(
            hop_success_prob=args.hop_success_prob,
            extraction_depth_bias=args.depth_bias,
        )
        return ScriptedPolicy(capability)
    if args.policy == "remote":
        if not args.base_url:
            raise UsageError("--base-url is required for the remote policy")
        return RemotePolicy(base_url=args.base_url)
    if args.policy == "parametric":
        if not args.policy_file:
            raise UsageError("--policy-file is required for the parametric policy")
        with open(args.policy_file, "r", encoding="utf-8") as handle:
            policy = ParametricPolicy.from_dict(json.load(handle))
        return ParametricTextPolicy(policy, max_turns=config.max_turns, k=config.k)
    raise UsageError(f"unknown policy {args.policy!r}")


def _retrievers(args, records):
    tasks = None
    try:
        tasks = load_tasks(args.dataset)
    except SchemaError:
        tasks = None
    use_oracle = args.retriever == "oracle" or (args.retriever == "auto" and tasks is not None)
    if use_oracle:
        if tasks is None:
            raise UsageError(
                "oracle retrieval needs a dataset with embedded task metadata; "
                "generate one with the tasks subcommand or use --retriever lexical"
            )
        return tasks, oracle_retriever_for(tasks)
    if not args.corpus:
        raise UsageError("--corpus is required for lexical retrieval")
    index = ingest_corpus(args.corpus)
    return tasks, lambda _qid: index


def _write_metrics(report: MetricsReport, out_json: str | None, out_csv: str | None, extra: dict | None = None):
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    if out_json:
        Path(out_json).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if out_csv:
        with open(out_csv, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(MetricsReport.CSV_COLUMNS)
            writer.writerow(report.csv_row())
    print(json.dumps(payload, sort_keys=True))


# --- subcommands -----------------------------------------------------------


def cmd_tasks(args, file_config: dict) -> int:
    depths = _parse_int_list(args.depths, "--depths")
    tasks = generate_tasks(args.count, depths, args.seed, distractors=args.distractors)
    write_task_files(tasks, args.out_dataset, args.out_corpus)
    resolved = {
        "count": args.count,
        "depths": depths,
        "distractors": args.distractors,
        "seed": args.seed,
        "out_dataset": str(args.out_dataset),
        "out_corpus": str(args.out_corpus),
    }
    _write_provenance(args.out_dataset, "tasks", resolved)
    print(f"wrote {len(tasks)} tasks to {args.out_dataset} and corpus to {args.out_corpus}")
    return 0


def cmd_ingest(args, file_config: dict) -> int:
    index = ingest_corpus(args.corpus)
    stats = index.stats()
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_rollout(args, file_config: dict) -> int:
    config = _episode_config(file_config, args)
    records = read_dataset(args.dataset)
    tasks, retriever_for = _retrievers(args, records)
    backend = _build_backend(args, config)
    trajectories = run_dataset(
        backend,
        records,
        retriever_for,
        config,
        tasks=tasks,
        seed=args.seed,
        jobs=args.jobs,
    )
    write_trajectories(args.out, trajectories)
    _write_provenance(args.out, "rollout", {"episode": config.to_dict(), "seed": args.seed, "policy": args.policy})
    print(f"wrote {len(trajectories)} trajectories to {args.out}")
    return 0


def cmd_score(args, file_config: dict) -> int:
    constants = _reward_constants(file_config)
    records = read_dataset(args.dataset)
    ablate = tuple(args.ablate or ())
    scored = []
    for traj in read_trajectories(args.trajectories):
        record = records.get(traj.question_id)
        if record is None:
            raise SchemaError(
                f"trajectory references unknown question id {traj.question_id!r}",
                field="question_id",
            )
        try:
            _, updated = score_trajectory(traj, record, constants, ablate=ablate)
        except ValueError as exc:
            raise SchemaError(str(exc), field="intermediate_answer") from exc
        scored.append(updated)
    write_trajectories(args.out, scored)
    _write_provenance(args.out, "score", {"rewards": constants.to_dict(), "ablate": list(ablate)})
    print(f"scored {len(scored)} trajectories into {args.out}")
    return 0


def cmd_eval(args, file_config: dict) -> int:
    records = read_dataset(args.dataset)
    trajectories = list(read_trajectories(args.trajectories))
    try:
        report = aggregate_metrics(trajectories, records)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _write_metrics(report, args.out_json, args.out_csv)
    if args.out_json:
        _write_provenance(args.out_json, "eval", {"trajectories": str(args.trajectories)})
    return 0


def cmd_report(args, file_config: dict) -> int:
    records = read_dataset(args.dataset)
    trajectories = list(read_trajectories(args.trajectories))
    if not trajectories:
        raise UsageError("empty evaluation set")
    counts = {"under_search": 0, "effective_search": 0, "over_search": 0}
    for traj in trajectories:
        if traj.t_c is None or any(s.rewards is None for s in traj.steps):
            raise UsageError("trajectories are unscored; run the score subcommand first")
        for key, value in classify_steps(traj.t_c, len(traj.steps)).items():
            counts[key] += value
    report = aggregate_metrics(trajectories, records)
    _write_metrics(report, args.out_json, args.out_csv, extra={"steps": counts})
    if args.out_json:
        _write_provenance(args.out_json, "report", {"trajectories": str(args.trajectories)})
    return 0


def cmd_probe(args, file_config: dict) -> int:
    config = _episode_config(file_config, args)
    depths = _parse_int_list(args.depths, "--depths")
    records = read_dataset(args.dataset)
    tasks, retriever_for = _retrievers(args, records)
    backend = _build_backend(args, config)
    rows = probe_fixed_depth(
        backend,
        records,
        retriever_for,
        depths,
        tasks=tasks,
        config=config,
        seed=args.seed,
        jobs=args.jobs,
    )
    with open(args.out, "w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=["depth", "em", "osr", "n"])
        writer.writeheader()
        writer.writerows(rows)
    _write_provenance(args.out, "probe", {"episode": config.to_dict(), "depths": depths, "seed": args.seed})
    for row in rows:
        print(f"depth {row['depth']}: em={row['em']:.4f} osr={row['osr']:.4f} n={row['n']}")
    return 0


def cmd_curve(args, file_config: dict) -> int:
    constants = _reward_constants(file_config)
    tc_values = _parse_int_list(args.tc, "--tc")
    if not tc_values:
        raise UsageError("--tc must name at least one capability depth")
    for tc in tc_values:
        if not 1 <= tc <= args.max_depth:
            raise UsageError(f"capability depth {tc} outside 1..{args.max_depth}")
    columns = {}
    for tc in tc_values:
        curve = cumulative_reward_curve(
            tc, args.max_depth, constants, include_outcome=args.include_outcome
        )
        columns[tc] = [value for _, value in curve]
    with open(args.out, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["depth"] + [f"tc_{tc}" for tc in tc_values])
        for i in range(args.max_depth):
            writer.writerow([i + 1] + [repr(columns[tc][i]) for tc in tc_values])
    _write_provenance(
        args.out,
        "curve",
        {"tc": tc_values, "max_depth": args.max_depth, "include_outcome": args.include_outcome},
    )
    print(f"wrote reward curve for t_c in {tc_values} to {args.out}")
    return 0


def cmd_train(args, file_config: dict) -> int:
    env_section = _merge({}, file_config.get("env", {}), _load_config_file(args.env_config))
    trainer_section = _merge({}, file_config.get("trainer", {}), _load_config_file(args.trainer_config))
    if args.seed is not None:
        trainer_section["seed"] = args.seed
    if args.iterations is not None:
        trainer_section["total_iterations"] = args.iterations
    if args.batch_episodes is not None:
        trainer_section["batch_episodes"] = args.batch_episodes
    try:
        env = EnvSpec.from_dict(env_section)
        trainer = TrainerConfig.from_dict(trainer_section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training configuration: {exc}") from exc
    constants = _reward_constants(file_config)
    ablate = tuple(args.ablate or ())
    for component in ablate:
        if component not in ABLATABLE_COMPONENTS:
            raise UsageError(f"--ablate must be one of {ABLATABLE_COMPONENTS}")

    def progress(iteration: int, row: dict) -> None:
        if args.verbose and iteration % 50 == 0:
            print(
                f"iter {iteration}: sd={row['mean_sd']:.2f} em={row['em']:.3f} "
                f"valid={row['valid_ratio']:.3f} osr={row['osr']:.3f}"
            )

    policy, log = train(env, trainer, constants, ablate=ablate, progress=progress)
    log.to_csv(args.out_log)
    digest = config_hash(trainer, env, constants)
    Path(args.out_policy).write_text(
        json.dumps(policy.to_dict(config_hash=digest), indent=2) + "\n", encoding="utf-8"
    )
    resolved = {
        "env": env.to_dict(),
        "trainer": trainer.to_dict(),
        "rewards": constants.to_dict(),
        "ablate": list(ablate),
        "config_hash": digest,
    }
    _write_provenance(args.out_log, "train", resolved)
    _write_provenance(args.out_policy, "train", resolved)
    final = log.rows[-1]
    print(
        f"trained {trainer.total_iterations} iterations: "
        f"sd={final['mean_sd']:.3f} em={final['em']:.3f} valid={final['valid_ratio']:.3f} "
        f"osr={final['osr']:.3f}"
    )
    return 0


def _add_common_rollout_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", required=True, help="JSON Lines dataset file")
    parser.add_argument("--corpus", help="JSON Lines corpus file (lexical retrieval)")
    parser.add_argument(
        "--policy", choices=("scripted", "remote", "parametric"), default="scripted"
    )
    parser.add_argument(
        "--retriever",
        choices=("auto", "oracle", "lexical"),
        default="auto",
        help="auto uses the oracle when task metadata is embedded in the dataset",
    )
    parser.add_argument("--max-turns", type=int, default=None, dest="max_turns")
    parser.add_argument("--k", type=int, default=None)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--hop-success-prob", type=float, default=1.0, dest="hop_success_prob")
    parser.add_argument("--depth-bias", type=int, default=0, dest="depth_bias")
    parser.add_argument("--base-url", dest="base_url", help="remote generation endpoint")
    parser.add_argument("--policy-file", dest="policy_file", help="parametric policy checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="searchrl",
        description="Adaptive search-depth rewards, probes, and desk-scale PPO training.",
        epilog=(
            "Configuration precedence: built-in defaults, then the --config JSON file "
            "(sections: rewards, episode, trainer, env), then explicit flags."
        ),
    )
    parser.add_argument("--config", help="JSON config file merged under each subcommand")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tasks", help="generate synthetic multi-hop tasks")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--depths", default="1,2,3")
    p.add_argument("--distractors", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dataset", required=True, dest="out_dataset")
    p.add_argument("--out-corpus", required=True, dest="out_corpus")
    p.set_defaults(func=cmd_tasks)

    p = sub.add_parser("ingest", help="validate a corpus and print index stats")
    p.add_argument("--corpus", required=True)
    p.add_argument("--check", action="store_true", help="validate only (default behaviour)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("rollout", help="run every dataset question once")
    _add_common_rollout_flags(p)
    p.add_argument("--fixed-depth", type=int, default=None, dest="fixed_depth")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("score", help="fill rewards and capability depth into trajectories")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--ablate", action="append", choices=ABLATABLE_COMPONENTS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="aggregate EM/F1/SD/SE/OSR over trajectories")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-json", dest="out_json")
    p.add_argument("--out-csv", dest="out_csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="metrics plus per-branch step classification")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-json", dest="out_json")
    p.add_argument("--out-csv", dest="out_csv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("probe", help="force fixed search depths and tabulate EM/OSR")
    _add_common_rollout_flags(p)
    p.add_argument("--depths", default="0,1,2,3,4")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("curve", help="cumulative reward versus stop depth table")
    p.add_argument("--tc", required=True, help="comma-separated capability depths")
    p.add_argument("--max-depth", type=int, default=8, dest="max_depth")
    outcome = p.add_mutually_exclusive_group()
    outcome.add_argument("--include-outcome", action="store_true", default=True, dest="include_outcome")
    outcome.add_argument("--no-outcome", action="store_false", dest="include_outcome")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("train", help="desk-scale PPO over the synthetic environment")
    p.add_argument("--env-config", dest="env_config", help="JSON file with EnvSpec fields")
    p.add_argument("--trainer-config", dest="trainer_config", help="JSON file with TrainerConfig fields")
    p.add_argument("--ablate", action="append", choices=ABLATABLE_COMPONENTS)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch-episodes", type=int, default=None, dest="batch_episodes")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out-log", required=True, dest="out_log")
    p.add_argument("--out-policy", required=True, dest="out_policy")
    p.set_defaults(func=cmd_train)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_config = _load_config_file(args.config)
        return args.func(args, file_config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_USAGE
    except SchemaError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return _EXIT_DATA
    except (TransportError, ProtocolError) as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return _EXIT_TRANSPORT
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return _EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
