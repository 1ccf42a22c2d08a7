"""Command-line front end: learn, run, attack, bench, fetch-log.

Exit codes: 0 clean, 1 detection or assertion mismatch, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .adversary import ScenarioError, apply, dump_scenarios, load_scenarios, scenario_suite
from .bench import (
    BATCH_SIZES,
    FEEDBACK_FREQUENCIES,
    BenchmarkGrid,
    format_overhead_table,
    overhead_trend,
    plot_chart,
    run_grid,
    signing_context,
    transfer_trend,
    write_csv,
)
from .cfg import CFGFormatError, deserialize, read_log, serialize
from .channel import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_FEEDBACK_FREQUENCY,
    DEFAULT_QUEUE_CAPACITY,
    DEFAULT_STALL_TIMEOUT,
    Hooks,
    RunConfig,
    run_pipeline,
)
from .ir import IRError, ParseError
from .ir.interp import Memory
from .workload import DRIVERS, Workload, load_program, prepare

EXIT_OK, EXIT_DETECTED, EXIT_USAGE = 0, 1, 2
KEYFILE_ENV = "CFA_KEYFILE"


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"cfattest: {msg}", file=sys.stderr)


def load_keys() -> Optional[bytes]:
    """Provisioning material from $CFA_KEYFILE, or None for fresh random keys."""
    path = os.environ.get(KEYFILE_ENV)
    if not path:
        return None
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {KEYFILE_ENV}: {exc}") from None
    if len(data) != 64:
        raise UsageError(f"{KEYFILE_ENV} must hold exactly 64 bytes, found {len(data)}")
    return data


def _program(spec: str):
    try:
        return load_program(spec)
    except (OSError, KeyError) as exc:
        raise UsageError(f"cannot load program {spec}: {exc}") from None
    except (ParseError, IRError) as exc:
        raise UsageError(f"malformed program {spec}: {exc}") from None


def _builtin_name(spec: str) -> Optional[str]:
    return spec.split(":", 1)[1] if spec.startswith("builtin:") else None


def _inputs(path: Optional[str]) -> Optional[Workload]:
    if path is None:
        return None
    try:
        return Workload.from_lines(Path(path).read_text().splitlines())
    except OSError as exc:
        raise UsageError(f"cannot read inputs: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _config(args) -> RunConfig:
    try:
        return RunConfig(
            batch_size=args.batch_size,
            feedback_frequency=args.feedback_freq,
            queue_capacity=args.queue_capacity,
            timing=False,
            stall_timeout=args.stall_timeout,
            halt_on_violation=getattr(args, "halt_on_violation", False),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_learn(args) -> int:
    program = _program(args.program)
    iprog = prepare(program)
    driver = _inputs(args.inputs)
    if driver is None:
        name = _builtin_name(args.program)
        if name is None:
            raise UsageError("--inputs is required for program files")
        driver = DRIVERS[name]()
    if len(driver) == 0:
        raise UsageError("driver input set is empty")
    result = run_pipeline(iprog, None, _config(args), driver, keys=load_keys())
    if result.error is not None:
        _err(f"learning aborted: {result.error}")
        return EXIT_DETECTED
    cfg = result.cfg
    Path(args.cfg).write_bytes(serialize(cfg))
    print(
        f"nodes={len(cfg.nodes)} edges={len(cfg.edges)} starts={len(cfg.starts)} "
        f"ends={len(cfg.ends)} requests={len(driver)} -> {args.cfg}"
    )
    return EXIT_OK


def _parse_hijack(text: str) -> tuple[int, int, int, str]:
    parts = text.split(":")
    if len(parts) != 4:
        raise UsageError("--hijack takes REQUEST:TABLE:INDEX:BLOCK")
    try:
        return int(parts[0]), int(parts[1]), int(parts[2]), parts[3]
    except ValueError:
        raise UsageError("--hijack REQUEST, TABLE and INDEX must be integers") from None


def cmd_run(args) -> int:
    program = _program(args.program)
    iprog = prepare(program)
    try:
        cfg = deserialize(Path(args.cfg).read_bytes())
    except OSError as exc:
        raise UsageError(f"cannot read CFG: {exc}") from None
    except CFGFormatError as exc:
        raise UsageError(f"bad CFG file {args.cfg}: {exc}") from None

    workload = _inputs(args.inputs)
    if workload is None:
        name = _builtin_name(args.program)
        if name == "signing":
            workload = Workload.signing(args.requests, args.seed)
        elif name is not None:
            workload = DRIVERS[name]()
        else:
            raise UsageError("--inputs is required for program files")

    hooks = None
    if args.hijack:
        req, table, index, target = _parse_hijack(args.hijack)
        memory = Memory.of(iprog.program)
        try:
            memory.jump_tables[table][index] = iprog.program.block_address(target)
        except (IndexError, KeyError):
            raise UsageError(f"--hijack: no table entry {table}[{index}] or block {target!r}") from None
        hooks = Hooks(memory_for=lambda i: memory if i == req else None)

    result = run_pipeline(iprog, cfg, _config(args), workload, keys=load_keys(), hooks=hooks)
    text = result.log_text()
    if args.log:
        Path(args.log).write_text(text)
    else:
        sys.stdout.write(text)
    bad = len(result.violations)
    print(
        f"requests={result.metrics.requests} records={len(result.log)} violations={bad}",
        file=sys.stderr if not args.log else sys.stdout,
    )
    if result.error is not None:
        _err(f"protocol error at batch {result.error.batch_no}: {result.error}")
        return EXIT_DETECTED
    return EXIT_DETECTED if bad else EXIT_OK


def cmd_attack(args) -> int:
    if args.dump_suite:
        Path(args.dump_suite).write_text(dump_scenarios(scenario_suite()))
        print(f"wrote {len(scenario_suite())} scenarios to {args.dump_suite}")
        return EXIT_OK
    try:
        scenarios = load_scenarios(args.scenario) if args.scenario else scenario_suite()
    except OSError as exc:
        raise UsageError(f"cannot read scenarios: {exc}") from None
    except ScenarioError as exc:
        raise UsageError(str(exc)) from None
    keys = load_keys()
    mismatches = 0
    for scenario in scenarios:
        try:
            outcome = apply(scenario, keys=keys)
        except ScenarioError as exc:
            raise UsageError(f"{scenario.name}: {exc}") from None
        print(outcome.summary())
        if outcome.message and args.verbose:
            print(f"    {outcome.message}")
        mismatches += not outcome.matched
    print(f"{len(scenarios) - mismatches}/{len(scenarios)} scenarios matched")
    return EXIT_DETECTED if mismatches else EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def cmd_bench(args) -> int:
    try:
        grid = BenchmarkGrid(
            batch_sizes=args.batch_sizes,
            feedback_frequencies=args.freqs,
            repetitions=args.repetitions,
            requests=args.requests,
            seed=args.seed,
            queue_capacity=args.queue_capacity,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = run_grid(grid, signing_context(grid.requests, grid.seed))
    csv_text = write_csv(rows)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    if args.chart:
        plot_chart(rows, args.chart)
    out = sys.stdout if args.csv else sys.stderr
    out.write(format_overhead_table(rows))
    failed = 0
    for check in (transfer_trend(rows), overhead_trend(rows)):
        print(check.line(), file=out)
        failed += not check.passed
    return EXIT_DETECTED if failed else EXIT_OK


def _parse_range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition(":")
    try:
        if not sep:
            return int(lo), int(lo)
        return int(lo) if lo else 0, int(hi) if hi else sys.maxsize
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A:B, got {text!r}") from None


def cmd_fetch_log(args) -> int:
    try:
        lines = Path(args.log_file).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read log: {exc}") from None
    records, bad = read_log(lines)
    if args.requests:
        lo, hi = args.requests
        records = [r for r in records if r.request is not None and lo <= r.request <= hi]
    if args.violations_only:
        records = [r for r in records if not r.valid]
    if args.violations_first:
        records = sorted(records, key=lambda r: r.valid)  # stable: keeps log order within each group
    for r in records:
        print(r.to_line())
    for lineno, line in bad:
        _err(f"line {lineno}: corrupt record: {line!r}")
    return EXIT_DETECTED if bad else EXIT_OK


def cmd_keygen(args) -> int:
    Path(args.out).write_bytes(os.urandom(64))
    os.chmod(args.out, 0o600)
    print(f"wrote 64 bytes of provisioning material to {args.out}")
    return EXIT_OK


def _add_channel_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE, help="IDs per sealed batch")
    p.add_argument("--feedback-freq", type=int, default=DEFAULT_FEEDBACK_FREQUENCY,
                   help="batches per acknowledgment")
    p.add_argument("--queue-capacity", type=int, default=DEFAULT_QUEUE_CAPACITY, help="queue slots (batches)")
    p.add_argument("--stall-timeout", type=float, default=DEFAULT_STALL_TIMEOUT,
                   help="seconds the prover waits for an acknowledgment")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfattest", description="Control-flow attestation of toy programs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn", help="record a CFG from driver inputs")
    p.add_argument("program", help="program file, or builtin:NAME")
    p.add_argument("--inputs", help="driver inputs, one request per line")
    p.add_argument("--cfg", required=True, help="output CFG file")
    _add_channel_flags(p)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("run", help="attest a workload against a CFG")
    p.add_argument("program", help="program file, or builtin:NAME")
    p.add_argument("--cfg", required=True, help="CFG file from `learn`")
    p.add_argument("--inputs", help="request inputs, one per line")
    p.add_argument("--requests", type=int, default=100, help="generated signing requests")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="attestation log output (default stdout)")
    p.add_argument("--halt-on-violation", action="store_true", help="stop the target after a violation")
    p.add_argument("--hijack", metavar="REQ:TABLE:INDEX:BLOCK",
                   help="overwrite a jump-table entry for one request")
    _add_channel_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("attack", help="replay attack scenarios and compare outcomes")
    p.add_argument("scenario", nargs="?", help="JSON scenario file (default: built-in suite)")
    p.add_argument("--dump-suite", metavar="FILE", help="write the built-in suite as JSON and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("bench", help="batch-size / feedback-frequency sweep")
    p.add_argument("--csv", help="CSV output (default stdout)")
    p.add_argument("--chart", help="SVG chart output")
    p.add_argument("--batch-sizes", type=_int_list, default=list(BATCH_SIZES))
    p.add_argument("--freqs", type=_int_list, default=list(FEEDBACK_FREQUENCIES))
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--requests", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--queue-capacity", type=int, default=DEFAULT_QUEUE_CAPACITY)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("fetch-log", help="print an attestation log")
    p.add_argument("log_file")
    p.add_argument("--violations-first", action="store_true")
    p.add_argument("--violations-only", action="store_true")
    p.add_argument("--requests", type=_parse_range, metavar="A:B", help="inclusive request range")
    p.set_defaults(func=cmd_fetch_log)

    p = sub.add_parser("keygen", help="write a 64-byte provisioning file")
    p.add_argument("out")
    p.set_defaults(func=cmd_keygen)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
