"""Command-line entry point.

Subcommands::

    admmguard generate --count 5 --out problems/
    admmguard solve --problem problems/problem_0000.json --attack.vector noise_injection
    admmguard batch --config detection.ini --batch.workers 4
    admmguard audit --problem problems/problem_0000.json --trace trace.jsonl

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.
``ADMMGUARD_OUTPUT_DIR`` overrides the output directory of every
subcommand; nothing else is read from the environment.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .detector import detect
from .generator import generate_instance
from .harness import (
    PRESETS,
    SECTIONS,
    BatchConfig,
    ConfigError,
    emit_report,
    load_config,
    merge_overrides,
    resolve_output_dir,
    run_batch,
    solve_problem,
)
from .problem import StructureError, load_problem, read_trace, save_problem, write_trace

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _add_config_flags(parser: argparse.ArgumentParser, sections=tuple(SECTIONS)) -> None:
    parser.add_argument("--config", help="INI config file (see admmguard.harness for the schema)")
    for section in sections:
        group = parser.add_argument_group(section)
        for key in SECTIONS[section]:
            group.add_argument(f"--{section}.{key}", dest=f"{section}.{key}", default=None, metavar="VALUE")


def _config_from_args(args, base: dict | None = None) -> BatchConfig:
    data = base or {}
    if args.config:
        data = merge_overrides(data, {f"{s}.{k}": v for s, kv in load_config(args.config).items() for k, v in kv.items()})
    flags = {key: value for key, value in vars(args).items() if "." in key and value is not None}
    data = merge_overrides(data, flags)
    cfg = BatchConfig.from_dict(data)
    return replace(cfg, output_dir=resolve_output_dir(data.get("batch", {}).get("output_dir")))


def cmd_generate(args) -> int:
    cfg = _config_from_args(args)
    out = Path(resolve_output_dir(args.out))
    out.mkdir(parents=True, exist_ok=True)
    for index in range(args.start, args.start + args.count):
        path = out / f"problem_{index:04d}.json"
        save_problem(generate_instance(cfg.generator, index), path)
        print(path)
    return EXIT_OK


def cmd_solve(args) -> int:
    """One problem through the configured hooks; writes the trace and a report."""
    base = {"batch": {"n_unattacked": 1, "n_attacked": 0}, "attack": {"vector": "none"}}
    cfg = _config_from_args(args, base)
    if cfg.attack is not None:
        cfg = replace(cfg, n_unattacked=0, n_attacked=1)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.problem:
        problem = load_problem(args.problem)
    else:
        problem = generate_instance(cfg.generator, args.index)
    trace, report = solve_problem(cfg, problem, cfg.attack)
    trace_path = out / args.trace_name
    write_trace(trace, trace_path)
    summary = {
        "n": problem.n, "m": problem.m, "p": problem.p,
        "termination": trace.termination, "iterations": trace.k,
        "r_norm": trace.final().r_norm if trace.entries else None,
        "s_norm": trace.final().s_norm if trace.entries else None,
        "attack": None if cfg.attack is None else cfg.attack.to_dict(),
        "detection": None if report is None else report.to_record(),
        "trace": str(trace_path),
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_batch(args) -> int:
    base = PRESETS["convergence"] if args.long else PRESETS["detection"]
    cfg = _config_from_args(args, base)

    def progress(done, total):
        if args.verbose:
            print(f"{done}/{total}", file=sys.stderr)

    results = run_batch(cfg, progress)
    paths = emit_report(results)
    print(json.dumps({"summary": results.summary(), "files": [str(p) for p in paths]}, indent=2))
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = _config_from_args(args)
    problem = load_problem(args.problem)
    trace = read_trace(args.trace, problem.link, cfg.admm.rho, problem)
    if cfg.detector is None:
        raise ConfigError("audit needs the detector enabled")
    report = detect(trace, problem.link, cfg.detector)
    record = dict(report.to_record(), caveat=report.caveat, iterations=trace.k)
    print(json.dumps(record, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="admmguard", description="ADMM under attack: solve, audit, experiment.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write seeded random problems as JSON")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--start", type=int, default=0, help="first instance index")
    p.add_argument("--out", default=None, help="output directory")
    _add_config_flags(p, ("generator",))
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("solve", help="solve one problem, optionally attacked/audited/mitigated")
    p.add_argument("--problem", help="problem JSON; default draws instance --index")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--trace-name", default="trace.jsonl")
    _add_config_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("batch", help="run a population and write the reports")
    p.add_argument("--long", action="store_true", help="10,000-problem unattacked convergence preset")
    p.add_argument("--verbose", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("audit", help="run the detector on a saved trace")
    p.add_argument("--problem", required=True)
    p.add_argument("--trace", required=True)
    _add_config_flags(p, ("admm", "detector"))
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, StructureError, FileNotFoundError, json.JSONDecodeError, KeyError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # anything else is a failure of the run itself
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
