"""Command-line scenario runner.

Subcommands:

* ``run`` executes a scenario file, writes one CSV row per repetition, and
  prints a summary. Transcripts can be saved next to the CSV for replay.
* ``attest-bench`` tabulates simulated attestation costs per firmware size.
* ``replay`` pretty-prints a saved transcript with stage annotations.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import scenario as sc_mod
from .scenario import ConfigError, ParseError
from .server import PilotStrategy, SendMode


def _add_run(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("run", help="run a scenario file and emit CSV rows")
    p.add_argument("scenario", help="scenario file (TOML, or JSON by extension)")
    p.add_argument("-o", "--output", help="CSV output path (default: stdout)")
    p.add_argument("--seed", type=int, help="override the scenario base seed")
    p.add_argument("--repetitions", type=int, help="override repetition count")
    p.add_argument(
        "--sequential",
        action="store_true",
        help="update one token at a time instead of broadcasting",
    )
    p.add_argument(
        "--strategy",
        choices=[s.value for s in PilotStrategy],
        help="override the pilot election strategy",
    )
    p.add_argument(
        "--filter-outliers",
        action="store_true",
        help="drop repetitions outside 1.5x the latency quartiles from the summary",
    )
    p.add_argument(
        "--save-transcripts",
        metavar="DIR",
        help="write one JSON-lines transcript per repetition into DIR",
    )


def _add_attest(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("attest-bench", help="simulated attestation cost per size")
    p.add_argument(
        "--sizes",
        type=int,
        nargs="+",
        default=[115, 407, 1280],
        help="firmware sizes in bytes",
    )
    p.add_argument("-o", "--output", help="CSV output path (default: stdout)")


def _add_replay(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("replay", help="render a stored transcript")
    p.add_argument("transcript", help="JSON-lines transcript file")


def _cmd_run(args: argparse.Namespace) -> int:
    sc = sc_mod.load_scenario(args.scenario)
    if args.sequential:
        sc.send_mode = SendMode.SEQUENTIAL
    if args.strategy:
        sc.strategy = PilotStrategy(args.strategy)
    if args.filter_outliers:
        sc.filter_outliers = True
    result = sc_mod.run_scenario(
        sc,
        seed_override=args.seed,
        repetitions_override=args.repetitions,
        keep_transcripts=bool(args.save_transcripts),
    )
    if args.output:
        sc_mod.write_csv(result.rows, args.output)
    else:
        sc_mod.write_csv(result.rows, sys.stdout)
    if args.save_transcripts:
        outdir = Path(args.save_transcripts)
        outdir.mkdir(parents=True, exist_ok=True)
        for row, text in zip(result.rows, result.transcripts):
            (outdir / f"{sc.name}_{row['seed']}.jsonl").write_text(text)
    summary = result.summary
    print(
        f"# {sc.name}: {summary['runs']} runs, "
        f"{summary['all_updated_runs']} fully updated, "
        f"latency {summary['latency_mean_s']:.3f}s +/- {summary['latency_std_s']:.3f}, "
        f"throughput {summary['throughput_mean_bps']:.1f} bps"
        + (f", {summary['outliers_removed']} outliers removed" if summary["outliers_removed"] else ""),
        file=sys.stderr,
    )
    return 0


def _cmd_attest(args: argparse.Namespace) -> int:
    rows = sc_mod.attest_bench(args.sizes)
    import csv

    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        writer = csv.DictWriter(
            out, fieldnames=["firmware_bytes", "mode", "cycles", "compute_ms"], lineterminator="\n"
        )
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.output:
            out.close()
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    for line in sc_mod.replay_transcript(args.transcript):
        print(line)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="wisecr",
        description="Deterministic simulator for secure simultaneous firmware broadcast",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run(sub)
    _add_attest(sub)
    _add_replay(sub)
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "attest-bench":
            return _cmd_attest(args)
        if args.command == "replay":
            return _cmd_replay(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
