"""Command line entry point: ingest, query, evaluate, inspect, cost-report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import (
    evaluate,
    format_cost,
    load_dataset,
    load_settings,
    write_run,
)
from .ingest import ingest
from .loop import LoopConfig, QueryFailed, run_query
from .prompts import PromptSet
from .pyramid import PyramidUnavailable, build_pyramid, select_query_keywords
from .store import MemoryBank, SnapshotError


def _settings(args: argparse.Namespace):
    settings = load_settings(args.config)
    if getattr(args, "prompts", None):
        settings.prompts = PromptSet.load(args.prompts)
    depth = getattr(args, "depth", None) or settings.loop.depth_cap
    rounds = getattr(args, "max_rounds", None) or settings.loop.max_rounds
    settings.loop = LoopConfig(depth_cap=depth, max_rounds=rounds)
    return settings


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SystemExit(f"{path}:{lineno}: invalid JSON ({exc})")
    return rows


def cmd_ingest(args: argparse.Namespace) -> int:
    settings = _settings(args)
    bank_path = Path(args.bank)
    bank = MemoryBank.load(bank_path) if bank_path.exists() else MemoryBank()
    report = ingest(_read_jsonl(Path(args.input)), bank, settings.aux, settings.prompts)
    bank.snapshot(bank_path)
    print(json.dumps(report.to_dict(), indent=2))
    return 1 if report.errors and not report.records_added else 0


def cmd_query(args: argparse.Namespace) -> int:
    settings = _settings(args)
    bank = MemoryBank.load(args.bank)
    try:
        trace = run_query(
            args.question, bank, settings.main, settings.aux, settings.prompts, settings.loop
        )
    except QueryFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.trace:
        Path(args.trace).write_text(trace.to_json() + "\n", encoding="utf-8")
    print(trace.rewritten_answer)
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    bank = MemoryBank.load(args.bank)
    if args.keywords:
        q = [k.strip() for k in args.keywords.split(",") if k.strip()]
    else:
        settings = _settings(args)
        try:
            q = select_query_keywords(
                args.query, bank.vocabulary, settings.aux, settings.prompts, settings.loop.depth_cap
            )
        except PyramidUnavailable as exc:
            print(json.dumps({"query": args.query, "query_keywords": [], "error": str(exc)}, indent=2))
            return 1
    pyramid = build_pyramid(q, bank.mapping)
    print(json.dumps({"query": args.query, **pyramid.to_dict()}, indent=2))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    settings = _settings(args)
    dataset = load_dataset(args.dataset, args.format)
    out = Path(args.out)
    run = evaluate(
        dataset,
        settings.main,
        settings.aux,
        settings.prompts,
        settings.loop,
        cache_dir=None if args.no_cache else out / "banks",
        parallelism=args.parallelism or settings.parallelism,
    )
    paths = write_run(run, out)
    print(paths["text"].read_text(encoding="utf-8"), end="")
    return 0


def cmd_cost_report(args: argparse.Namespace) -> int:
    path = Path(args.run)
    if path.is_dir():
        path = path / "report.json"
    doc = json.loads(path.read_text(encoding="utf-8"))
    cost = doc["cost"]
    if args.json:
        print(json.dumps(cost, indent=2))
    else:
        print(format_cost(cost))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pyramem", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, retrieval: bool = True) -> None:
        p.add_argument("--config", help="INI config with [provider.main], [provider.aux], ...")
        p.add_argument("--prompts", help="directory overriding the packaged prompt templates")
        if retrieval:
            p.add_argument("--depth", type=int, help="pyramid depth (max query keywords)")
            p.add_argument("--max-rounds", type=int, help="maximum reflective rounds")

    p = sub.add_parser("ingest", help="extract keywords and add memories to a bank")
    p.add_argument("--input", required=True, help="JSONL of {question, answer, session?}")
    p.add_argument("--bank", required=True, help="bank snapshot path (created if missing)")
    common(p, retrieval=False)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("query", help="answer one question from a bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--trace", help="write the query trace JSON here")
    common(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="run a dataset and write reports")
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", choices=["locomo_json", "simple_jsonl"], default="simple_jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--no-cache", action="store_true", help="do not reuse cached banks")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="show the keyword pyramid for a query")
    p.add_argument("--bank", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--keywords", help="comma-separated keywords; skips model selection")
    common(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("cost-report", help="print the cost table of an evaluation")
    p.add_argument("--run", required=True, help="evaluate output directory or report.json")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_cost_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (SnapshotError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
