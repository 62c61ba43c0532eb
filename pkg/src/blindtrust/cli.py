"""Command-line entry point.

    blindtrust scenario run <file|dir>... [--seed N] [--trace out.jsonl]
    blindtrust bench [--iters N] [--json out.json]
    blindtrust trace inspect <file> [--protocol P]

Exit codes: 0 success (or an expected failure), 1 assertion failure,
2 malformed input.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .netsim import PROTOCOLS, ScenarioError, load_scenario, run_scenario

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_MALFORMED = 2

TRACE_KINDS = {"scenario", "envelope", "tpm", "adversary", "event", "result", "checkpoint", "failure", "summary"}
ENVELOPE_KEYS = {"seq", "tick", "sender", "recipient", "protocol", "step", "payload"}


def _seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("BLINDTRUST_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ScenarioError("BLINDTRUST_SEED", f"not an integer: {env!r}") from None
    return None


def _scenario_files(paths: list[str]) -> list[Path]:
    files = []
    for raw in paths:
        path = Path(raw)
        files.extend(sorted(path.rglob("*.json")) if path.is_dir() else [path])
    return files


def _run_one(path: Path, seed, trace, verbose: bool) -> int:
    try:
        scenario = load_scenario(path)
    except OSError as exc:
        print(f"error: cannot read {path}: {exc.strerror}", file=sys.stderr)
        return EXIT_MALFORMED
    except ScenarioError as exc:
        print(f"error: malformed scenario {path}: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    result = run_scenario(scenario, seed)
    if trace:
        result.trace.write(trace)
    if verbose:
        for i, (step, outcome) in enumerate(zip(scenario.steps, result.outcomes)):
            print(f"[{i:02d}] {step['op']:<10} {outcome}")
    if result.failure and verbose:
        print(f"FAILED {result.failure['message']}")
        for vf_id, diff in result.failure["diff"].items():
            for entry in diff:
                print(f"  {vf_id} {'NV' if entry['nv'] else 'PCR'} {entry['index']}: "
                      f"mock={entry['mock']} real={entry['real']}")
    verdict = "passed" if result.passed else "failed"
    if result.as_expected:
        note = " (expected)" if scenario.expect == "fail" else ""
        print(f"{scenario.name}: {verdict}{note}")
        return EXIT_OK
    print(f"{scenario.name}: {verdict}, but the scenario expects {scenario.expect}")
    return EXIT_FAILED


def cmd_scenario_run(args) -> int:
    try:
        seed = _seed(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    files = _scenario_files(args.files)
    if not files:
        print("error: no scenario files found", file=sys.stderr)
        return EXIT_MALFORMED
    if args.trace and len(files) > 1:
        print("error: --trace needs exactly one scenario file", file=sys.stderr)
        return EXIT_MALFORMED
    codes = [_run_one(path, seed, args.trace, verbose=len(files) == 1) for path in files]
    if len(files) > 1:
        bad = sum(code != EXIT_OK for code in codes)
        print(f"{len(files) - bad}/{len(files)} scenarios as expected")
    return max(codes)


def cmd_bench(args) -> int:
    from .bench import run_bench

    if args.iters < 2:
        print("error: --iters must be at least 2", file=sys.stderr)
        return EXIT_MALFORMED
    report = run_bench(args.iters)
    print(report.to_text())
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_json(), indent=2) + "\n")
    return EXIT_OK


def _abbrev(value: str, width: int = 8) -> str:
    """Shorten long hex digests; anything else is shown as is."""
    if len(value) <= 2 * width or any(c not in "0123456789abcdef" for c in value):
        return value
    return f"{value[:width]}..{value[-4:]}"


def _render_payload(payload: dict) -> str:
    parts = []
    for key in sorted(payload):
        value = payload[key]
        parts.append(f"{key}={_abbrev(value) if isinstance(value, str) else value}")
    return " ".join(parts)


def render_trace(lines: list[dict], protocol: str | None = None) -> list[str]:
    """Sequence-diagram style text for a trace; digests are abbreviated."""
    out = []
    for rec in lines:
        kind = rec["kind"]
        if kind == "scenario" and protocol is None:
            out.append(f"== scenario {rec['name']} (seed {rec['seed']})")
        elif kind == "envelope":
            if protocol and rec["protocol"] != protocol:
                continue
            out.append(f"#{rec['seq']:<4} t={rec['tick']:<4} {rec['sender']:>8} -> {rec['recipient']:<8} "
                       f"[{rec['protocol']}] {rec['step']}  {_render_payload(rec['payload'])}")
        elif kind == "tpm" and protocol is None:
            out.append(f"{'':16}{rec['party']:>8} :: {rec['command']}")
        elif kind == "adversary" and protocol is None:
            out.append(f"{'':16}{'ADV':>8} !! rule {rec['rule']} {rec['action']} on #{rec['seq']}")
        elif kind == "result" and protocol is None:
            flag = "ok" if rec["ok"] else "MISMATCH"
            out.append(f"-- step {rec['step']} {rec['op']}: {rec['outcome']} [{flag}]")
        elif kind == "summary":
            out.append(f"== {'passed' if rec['passed'] else 'FAILED'}: {rec['accepted']} accepted attestations, "
                       f"{rec['violations']} violations")
    return out


def load_trace(path) -> list[dict]:
    lines = []
    for number, text in enumerate(Path(path).read_text().splitlines(), 1):
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"line {number}", exc.msg) from None
        if not isinstance(rec, dict) or rec.get("kind") not in TRACE_KINDS:
            raise ScenarioError(f"line {number}", "record without a known 'kind'")
        if rec["kind"] == "envelope" and not ENVELOPE_KEYS <= set(rec):
            raise ScenarioError(f"line {number}", "envelope record missing fields")
        lines.append(rec)
    return lines


def cmd_trace_inspect(args) -> int:
    try:
        lines = load_trace(args.file)
    except OSError as exc:
        print(f"error: cannot read {args.file}: {exc.strerror}", file=sys.stderr)
        return EXIT_MALFORMED
    except ScenarioError as exc:
        print(f"error: not a trace file: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    for line in render_trace(lines, args.protocol):
        print(line)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blindtrust", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log protocol decisions")
    sub = parser.add_subparsers(dest="command", required=True)

    scenario = sub.add_parser("scenario", help="run scenario files").add_subparsers(dest="action", required=True)
    run = scenario.add_parser("run", help="run scenario files (directories are searched for *.json)")
    run.add_argument("files", nargs="+", metavar="file")
    run.add_argument("--seed", type=int, help="override the scenario seed (also BLINDTRUST_SEED)")
    run.add_argument("--trace", help="write the JSON-lines trace here")
    run.set_defaults(func=cmd_scenario_run)

    bench = sub.add_parser("bench", help="time the five protocols")
    bench.add_argument("--iters", type=int, default=50)
    bench.add_argument("--json", help="write the report (with raw samples) here")
    bench.set_defaults(func=cmd_bench)

    trace = sub.add_parser("trace", help="work with trace files").add_subparsers(dest="action", required=True)
    inspect = trace.add_parser("inspect", help="render a trace as a message sequence")
    inspect.add_argument("file")
    inspect.add_argument("--protocol", choices=PROTOCOLS)
    inspect.set_defaults(func=cmd_trace_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
