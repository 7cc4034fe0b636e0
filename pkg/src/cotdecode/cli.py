"""Command-line interface.

    cotdecode run --config exp.cfg [--key value ...]
    cotdecode gen-task --family coin_flip --rounds 3 --count 100 --out tasks.jsonl
    cotdecode trace --run runs/out --instance coin_flip_r3_0001
    cotdecode replay --run runs/out
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ExperimentConfig,
    apply_overrides,
    emit_report,
    ensure_writable,
    format_trace,
    load_config,
    replay_run,
    run_experiment,
)
from .tasks import (
    gen_coin_flip,
    gen_multistep_arithmetic,
    gen_web_of_lies,
    gen_year_parity,
)


def _collect_overrides(extras: list[str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    n = 0
    while n < len(extras):
        token = extras[n]
        if not token.startswith("--"):
            raise SystemExit(f"unexpected argument {token!r}; overrides are --key value")
        key = token[2:].replace("-", "_")
        if "=" in key:
            key, _, value = key.partition("=")
            n += 1
        else:
            if n + 1 >= len(extras):
                raise SystemExit(f"override {token!r} is missing a value")
            value = extras[n + 1]
            n += 2
        overrides[key] = value
    return overrides


def _cmd_run(args: argparse.Namespace, extras: list[str]) -> int:
    config = load_config(args.config) if args.config else ExperimentConfig()
    apply_overrides(config, _collect_overrides(extras))
    config.validate()
    ensure_writable(config.output_dir)
    report = run_experiment(config)
    emit_report(report, fmt=config.rows_format, output_dir=config.output_dir)
    status = "INCOMPLETE" if report.incomplete else "ok"
    print(
        f"{status}: {len(report.rows)} instances, accuracy {report.accuracy:.4f}"
        f" -> {config.output_dir}"
    )
    if report.incomplete:
        print(f"aborted: {report.error}", file=sys.stderr)
        return 1
    return 0


def _cmd_gen_task(args: argparse.Namespace) -> int:
    if args.family == "coin_flip":
        instances = gen_coin_flip(args.rounds, args.count, args.seed)
    elif args.family == "web_of_lies":
        instances = gen_web_of_lies(args.statements, args.count, args.seed)
    elif args.family == "arith":
        instances = gen_multistep_arithmetic(args.depth, args.length, args.count, args.seed)
    else:
        instances = gen_year_parity(limit=args.count or None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for instance in instances:
            record = {
                "id": instance.id,
                "question": instance.question,
                "answer": instance.ground_truth,
                **{k: v for k, v in instance.meta.items()},
            }
            fh.write(json.dumps(record) + "\n")
    print(f"wrote {len(instances)} instances -> {out}")
    return 0


def _cmd_trace(args: argparse.Namespace) -> int:
    print(format_trace(args.run, args.instance))
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    result = replay_run(args.run)
    print(f"checked {result['checked']} recorded confidences in {args.run}")
    if result["mismatches"]:
        for bad in result["mismatches"]:
            print(
                f"MISMATCH {bad['instance']} k={bad['branch_index']}: "
                f"recorded {bad['recorded']} recomputed {bad['recomputed']}",
                file=sys.stderr,
            )
        return 1
    print("all confidences match the traces")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cotdecode",
        description="Branch-and-score decoding engine with baseline decoders "
        "and synthetic reasoning tasks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser(
        "run",
        help="run an experiment from a flat key=value config; any config key "
        "can be overridden with --key value (defaults: k=10, branch_position=0, "
        "max_steps=128, template=standard_qa, top_n=max(2, k))",
    )
    run.add_argument("--config", help="path to a key = value config file")

    gen = sub.add_parser("gen-task", help="generate a synthetic task set as JSONL")
    gen.add_argument(
        "--family",
        required=True,
        choices=["coin_flip", "web_of_lies", "arith", "year_parity"],
    )
    gen.add_argument("--count", type=int, default=100)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--rounds", type=int, default=2, help="coin_flip rounds (2-4 typical)")
    gen.add_argument("--statements", type=int, default=3, help="web_of_lies chain length (3-5 typical)")
    gen.add_argument("--depth", type=int, default=0, help="arith nesting depth")
    gen.add_argument("--length", type=int, default=3, help="arith operands per level")
    gen.add_argument("--out", required=True)

    trace = sub.add_parser("trace", help="pretty-print one instance's path tree with per-step margins")
    trace.add_argument("--run", required=True)
    trace.add_argument("--instance", required=True)

    replay = sub.add_parser("replay", help="recompute confidences from emitted traces")
    replay.add_argument("--run", required=True)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args, extras = parser.parse_known_args(argv)
    if args.command == "run":
        return _cmd_run(args, extras)
    if extras:
        parser.error(f"unrecognized arguments: {' '.join(extras)}")
    if args.command == "gen-task":
        return _cmd_gen_task(args)
    if args.command == "trace":
        return _cmd_trace(args)
    return _cmd_replay(args)


if __name__ == "__main__":
    raise SystemExit(main())
