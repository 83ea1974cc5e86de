"""Command line front end.

Subcommands: compose (bundle single-objective tasks into multi-objective
prompts), rollout (run episodes against a policy and environment, writing a
trajectory archive), score (accuracy and efficiency metrics over an archive),
and export-masks (stitched token sequences with attention and loss masks).

Exit codes: 0 success, 1 usage or configuration problem, 2 bad input data,
3 integrity failure (mask or container verification).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import re
import sys
from pathlib import Path
from statistics import fmean

from .compose import CompositeTask, compose, load_composites, load_dataset, write_composites
from .core import (
    DEFAULT_COUNTER,
    ConfigError,
    DataError,
    IntegrityError,
    PRESETS,
    RolloutConfig,
    ValidationError,
    default_max_turns,
    load_config,
)
from .envs import Corpus, HttpSearchEnv, RetrievalEnv, ScriptedEnv, ShopEnv, load_catalog
from .masks import build_masks, export_masks, import_masks, stitch, verify_masks
from .metrics import aggregate, score_trajectory
from .rollout import HttpPolicy, RolloutError, ScriptedPolicy, TrajectoryRecord, run_batch

__all__ = ["main", "build_parser", "read_archive"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTEGRITY = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; route through ConfigError so usage
    # problems map to exit code 1 like every other configuration error.
    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(f"{self.prog}: {message}")


def _safe_name(task_id: str) -> str:
    return re.sub(r"[^\w.+-]", "_", task_id)


def _make_policy(spec: str, config: RolloutConfig):
    if spec.startswith("scripted:"):
        return ScriptedPolicy.from_file(spec[len("scripted:") :])
    if spec.startswith(("http://", "https://")):
        return HttpPolicy.from_config(config, url=spec)
    if spec.startswith("http:"):
        return HttpPolicy.from_config(config, url=spec[len("http:") :])
    raise ConfigError(f"unknown policy spec {spec!r}; use scripted:FILE or an http(s) URL")


def _make_env(spec: str, config: RolloutConfig):
    if spec.startswith("corpus:"):
        corpus = Corpus.from_jsonl(spec[len("corpus:") :])
        return RetrievalEnv(corpus, k=config.retrieval_k)
    if spec.startswith("shop:"):
        return ShopEnv(load_catalog(spec[len("shop:") :]))
    if spec.startswith("scripted:"):
        return ScriptedEnv.from_file(spec[len("scripted:") :])
    if spec.startswith("search:"):
        return HttpSearchEnv(spec[len("search:") :], api_key=os.environ.get(config.api_key_env))
    raise ConfigError(
        f"unknown env spec {spec!r}; use corpus:FILE, shop:FILE, scripted:FILE, or search:URL"
    )


def _cmd_compose(args: argparse.Namespace) -> int:
    if args.objectives < 1:
        raise ConfigError("--n must be >= 1")
    tasks = load_dataset(args.input)
    composites = compose(tasks, args.objectives, preset=PRESETS[args.preset], seed=args.seed)
    write_composites(args.output, composites)
    print(
        f"wrote {len(composites)} composite tasks "
        f"({args.objectives} objectives each, seed {args.seed}) to {args.output}"
    )
    return EXIT_OK


def _resolve_config(args: argparse.Namespace) -> RolloutConfig:
    config = load_config(args.config) if args.config else RolloutConfig()
    overrides = {}
    if args.mode is not None:
        overrides["mode"] = args.mode.replace("-", "_")
    if args.preset is not None:
        overrides["tag_preset"] = args.preset
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.k is not None:
        overrides["retrieval_k"] = args.k
    if args.max_tokens is not None:
        overrides["max_tokens_per_generation"] = args.max_tokens
    if args.no_hint:
        overrides["hint_enabled"] = False
    if args.turns is not None and args.turns != "auto":
        try:
            overrides["max_turns"] = int(args.turns)
        except ValueError:
            raise ConfigError(f"--turns must be an integer or 'auto', got {args.turns!r}") from None
    return config.with_overrides(**overrides) if overrides else config


def _cmd_rollout(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    tasks = load_composites(args.input)
    policy = _make_policy(args.policy, config)
    env = _make_env(args.env, config)

    if args.turns == "auto":
        # Budget follows objective count, so batch per distinct budget and
        # reassemble in input order.
        by_budget: dict[int, list[tuple[int, CompositeTask]]] = {}
        for idx, task in enumerate(tasks):
            by_budget.setdefault(default_max_turns(task.objective_count), []).append((idx, task))
        results: list[TrajectoryRecord | RolloutError | None] = [None] * len(tasks)
        for budget, group in sorted(by_budget.items()):
            batch = run_batch(
                [t for _, t in group],
                policy,
                env,
                config.with_overrides(max_turns=budget),
                concurrency=args.concurrency,
            )
            for (idx, _), result in zip(group, batch):
                results[idx] = result
    else:
        results = list(run_batch(tasks, policy, env, config, concurrency=args.concurrency))

    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    errors = []
    for task, result in zip(tasks, results):
        if isinstance(result, TrajectoryRecord):
            name = f"{_safe_name(task.id)}.json"
            (out_dir / name).write_text(
                json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )
            entries.append({"id": task.id, "file": name, "terminated": result.terminated})
        else:
            errors.append({"id": task.id, "error": str(result)})
            print(f"error: {result}", file=sys.stderr)
    manifest = {
        "version": 1,
        "config": config.to_dict(),
        "count": len(entries),
        "trajectories": entries,
        "errors": errors,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(
        f"wrote {len(entries)} trajectories to {out_dir}"
        + (f" ({len(errors)} failed)" if errors else "")
    )
    if tasks and not entries:
        return EXIT_DATA
    return EXIT_OK


def read_archive(path: str | Path) -> list[TrajectoryRecord]:
    """Load every trajectory listed in an archive's manifest, in order."""
    records = []
    for entry, loaded in _iter_archive(path):
        if isinstance(loaded, Exception):
            raise DataError(f"archive entry {entry['id']!r}: {loaded}") from None
        records.append(loaded)
    return records


def _iter_archive(path: str | Path):
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{root} is not a trajectory archive (no manifest.json)")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: {exc}") from None
    for entry in manifest.get("trajectories", []):
        file_path = root / entry["file"]
        try:
            data = json.loads(file_path.read_text(encoding="utf-8"))
            yield entry, TrajectoryRecord.from_dict(data)
        except FileNotFoundError as exc:
            yield entry, exc
        except (KeyError, TypeError, ValueError) as exc:
            yield entry, exc


_CSV_FIELDS = (
    "trajectory_id",
    "objective_count",
    "em",
    "f1",
    "peak_tokens",
    "dependency",
    "wall_time_s",
    "valid_action_ratio",
    "terminated",
    "reward",
)

_PLOT_FIELDS = ("em", "f1", "peak_tokens", "dependency", "wall_time_s")


def _cmd_score(args: argparse.Namespace) -> int:
    reports = []
    skipped = 0
    for entry, loaded in _iter_archive(args.archive):
        if isinstance(loaded, Exception):
            skipped += 1
            print(f"warning: skipping corrupt trajectory {entry['id']!r}: {loaded}", file=sys.stderr)
        else:
            reports.append(score_trajectory(loaded))
    summary = aggregate(reports)
    if skipped:
        summary["skipped"] = skipped
    out_json = Path(args.output + ".json")
    out_json.parent.mkdir(parents=True, exist_ok=True)
    out_json.write_text(
        json.dumps(
            {"aggregate": summary, "per_trajectory": [r.to_dict() for r in reports]},
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    out_csv = Path(args.output + ".csv")
    with out_csv.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
        writer.writeheader()
        for report in reports:
            row = report.to_dict()
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in _CSV_FIELDS})
    if args.plot_data:
        groups: dict[int, list] = {}
        for report in reports:
            groups.setdefault(report.objective_count, []).append(report)
        with Path(args.plot_data).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["objective_count", "episodes"] + [f"{m}_mean" for m in _PLOT_FIELDS])
            for count in sorted(groups):
                rows = groups[count]
                writer.writerow(
                    [count, len(rows)] + [fmean(getattr(r, m) for r in rows) for m in _PLOT_FIELDS]
                )
    if not reports:
        print("warning: archive holds no scoreable trajectories", file=sys.stderr)
        print(f"scored 0 trajectories -> {out_json}, {out_csv}")
        return EXIT_OK
    em = summary["em"]["mean"]
    f1_mean = summary["f1"]["mean"]
    print(f"scored {len(reports)} trajectories: EM {em:.4f}, F1 {f1_mean:.4f} -> {out_json}, {out_csv}")
    return EXIT_OK


def _cmd_export_masks(args: argparse.Namespace) -> int:
    records = read_archive(args.archive)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for record in records:
        try:
            stitched = stitch(record, DEFAULT_COUNTER)
            mask2d, mask1d = build_masks(stitched)
            if args.verify:
                verify_masks(record, stitched, mask2d, DEFAULT_COUNTER)
        except IntegrityError as exc:
            raise IntegrityError(f"trajectory {record.task.id!r}: {exc}") from None
        blob = export_masks(stitched, mask2d, mask1d, DEFAULT_COUNTER.name, fmt=args.format)
        if args.verify:
            re_st, re_mask, re_loss, _ = import_masks(blob)
            same = (
                (re_st.tokens == stitched.tokens).all()
                and (re_mask.words == mask2d.words).all()
                and (re_loss.loss == mask1d.loss).all()
            )
            if not same:
                raise IntegrityError(f"trajectory {record.task.id!r}: export does not round-trip")
        name = f"{_safe_name(record.task.id)}.mem1mask"
        (out_dir / name).write_bytes(blob)
        entries.append({"id": record.task.id, "file": name, "n": stitched.n})
    (out_dir / "masks_manifest.json").write_text(
        json.dumps({"format": args.format, "masks": entries}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    print(f"exported {len(entries)} mask containers ({args.format}) to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="memroll", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p_compose = sub.add_parser("compose", help="bundle tasks into multi-objective prompts")
    p_compose.add_argument("--in", dest="input", required=True, help="single-objective task JSONL")
    p_compose.add_argument("--n", dest="objectives", required=True, type=int, help="questions per composite")
    p_compose.add_argument("--out", dest="output", required=True, help="composite JSONL to write")
    p_compose.add_argument("--seed", type=int, default=0, help="shuffle seed (default 0)")
    p_compose.add_argument("--preset", choices=sorted(PRESETS), default="paper_body")
    p_compose.set_defaults(func=_cmd_compose)

    p_roll = sub.add_parser("rollout", help="run episodes and write a trajectory archive")
    p_roll.add_argument("--in", dest="input", required=True, help="composite task JSONL")
    p_roll.add_argument("--policy", required=True, help="scripted:FILE or an http(s) URL")
    p_roll.add_argument("--env", required=True, help="corpus:FILE, shop:FILE, scripted:FILE, or search:URL")
    p_roll.add_argument("--out", dest="output", required=True, help="archive directory to write")
    p_roll.add_argument("--config", help="rollout config file (JSON or key=value lines)")
    p_roll.add_argument("--turns", help="turn budget, or 'auto' to follow objective count")
    p_roll.add_argument("--mode", choices=("consolidate", "full-append", "full_append"))
    p_roll.add_argument("--preset", choices=sorted(PRESETS))
    p_roll.add_argument("--seed", type=int)
    p_roll.add_argument("--k", type=int, help="passages per retrieval")
    p_roll.add_argument("--max-tokens", type=int, dest="max_tokens")
    p_roll.add_argument("--no-hint", action="store_true", help="disable turns-left hints")
    p_roll.add_argument("--concurrency", type=int, default=1)
    p_roll.set_defaults(func=_cmd_rollout)

    p_score = sub.add_parser("score", help="score an archive (JSON + CSV)")
    p_score.add_argument("--archive", required=True, help="archive directory")
    p_score.add_argument("--out", dest="output", required=True, help="output path prefix")
    p_score.add_argument(
        "--plot-data", dest="plot_data", help="write per-objective-count series CSV"
    )
    p_score.set_defaults(func=_cmd_score)

    p_masks = sub.add_parser("export-masks", help="export stitched masked sequences")
    p_masks.add_argument("--archive", required=True, help="archive directory")
    p_masks.add_argument("--out", dest="output", required=True, help="directory for mask containers")
    p_masks.add_argument("--format", choices=("dense_bitpack", "index_list"), default="dense_bitpack")
    p_masks.add_argument("--verify", action="store_true", help="check masks against the rollout records")
    p_masks.set_defaults(func=_cmd_export_masks)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
