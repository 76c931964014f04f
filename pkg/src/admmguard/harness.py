"""Population experiments: generate, solve, audit, tabulate.

A batch is a list of problem ids. Ids ``0 .. n_unattacked - 1`` form the
unattacked cohort and the next ``n_attacked`` ids the attacked cohort.
Every id draws its own problem and attack stream from the master seeds,
so rows are independent of worker count and execution order.

Config files are INI-style, one section per component::

    [batch]
    n_unattacked = 500
    n_attacked = 500
    mitigation = false
    topology = aggregator
    workers = 1
    bounds_half_width = 1.0
    output_dir = admmguard-out

    [generator]
    maxdim = 10
    scale = 1.0
    seed = 0

    [admm]
    rho = 1.0
    eps_pri = 1e-10
    max_iterations = 500

    [attack]
    vector = noise_injection     ; or "none"
    magnitude = 0.1

    [detector]
    enabled = true
    strategy = evenly_spaced

Keys not given take the library defaults. Every key can also be set on
the command line as ``--section.key value``.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .attacks import (
    AttackInapplicable,
    AttackSpec,
    LinkingAttack,
    NoiseAttack,
    PrivateInfeasibilityAttack,
    objective_distortion_attack,
)
from .decentralized import ChainProblem, node_audit, run_decentralized
from .detector import DetectorConfig, detect
from .engine import AdmmConfig, Hooks, NumericalError, central_solution, run_admm
from .generator import GeneratorConfig, generate_instance, instance_seed
from .mitigator import ProjectionMitigator
from .problem import PublicBounds, QuadraticProblem

OUTPUT_ENV = "ADMMGUARD_OUTPUT_DIR"
TOPOLOGIES = ("aggregator", "chain")
ROW_FIELDS = ("id", "seed", "n", "m", "p", "attacked", "converged", "iterations", "verdict", "first_detection")


class ConfigError(ValueError):
    """Invalid batch configuration (bad key, value or combination)."""


@dataclass(frozen=True)
class BatchConfig:
    n_unattacked: int = 500
    n_attacked: int = 500
    generator: GeneratorConfig = GeneratorConfig()
    admm: AdmmConfig = AdmmConfig()
    attack: Optional[AttackSpec] = AttackSpec()
    detector: Optional[DetectorConfig] = DetectorConfig()
    mitigation: bool = False
    topology: str = "aggregator"
    workers: int = 1
    output_dir: str = "admmguard-out"
    bounds_half_width: float = 1.0  # public box around the central optimum

    def __post_init__(self):
        if self.n_unattacked < 0 or self.n_attacked < 0:
            raise ConfigError("cohort sizes must be non-negative")
        if self.n_unattacked + self.n_attacked < 1:
            raise ConfigError("a batch needs at least one problem")
        if self.n_attacked > 0 and self.attack is None:
            raise ConfigError("n_attacked > 0 needs an attack vector")
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"unknown topology {self.topology!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.bounds_half_width <= 0:
            raise ConfigError("bounds_half_width must be positive")
        if self.topology == "chain" and self.attack is not None and self.attack.vector == "objective_distortion":
            raise ConfigError("objective_distortion is only modelled with an aggregator")

    @property
    def total(self) -> int:
        return self.n_unattacked + self.n_attacked

    def to_dict(self) -> dict:
        return {
            "batch": {
                "n_unattacked": self.n_unattacked,
                "n_attacked": self.n_attacked,
                "mitigation": self.mitigation,
                "topology": self.topology,
                "workers": self.workers,
                "output_dir": self.output_dir,
                "bounds_half_width": self.bounds_half_width,
            },
            "generator": asdict(self.generator),
            "admm": asdict(self.admm),
            "attack": {"vector": "none"} if self.attack is None else asdict(self.attack),
            "detector": {"enabled": False} if self.detector is None else dict(asdict(self.detector), enabled=True),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BatchConfig":
        """Inverse of :meth:`to_dict`; values may be strings (INI) or typed (JSON)."""
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        try:
            parts = {name: _coerce_section(name, data.get(name, {})) for name in SECTIONS}
            attack = parts["attack"]
            vector = attack.pop("vector", "noise_injection")
            if vector == "none" and attack:
                raise ConfigError(f"attack keys {sorted(attack)} given with vector = none")
            detector = parts["detector"]
            enabled = detector.pop("enabled", True)
            return cls(
                generator=GeneratorConfig(**parts["generator"]),
                admm=AdmmConfig(**parts["admm"]),
                attack=None if vector == "none" else AttackSpec(vector=vector, **attack),
                detector=DetectorConfig(**detector) if enabled else None,
                **parts["batch"],
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err


# key -> converter, per section
SECTIONS = {
    "batch": {"n_unattacked": int, "n_attacked": int, "mitigation": "bool", "topology": str, "workers": int,
              "output_dir": str, "bounds_half_width": float},
    "generator": {"maxdim": int, "scale": float, "seed": int, "curvature_floor": float, "max_retries": int},
    "admm": {"rho": float, "eps_pri": float, "eps_dual": float, "max_iterations": int, "z0": "floats", "u0": "floats"},
    "attack": {"vector": str, "magnitude": float, "distribution": str, "start_iteration": int, "seed": int,
               "margin": float, "mode": str, "side": str, "scaling": float},
    "detector": {"enabled": "bool", "mode": str, "psd_tol": float, "kappa_max": float, "collinearity_tol": float,
                 "resolution": float, "strategy": str, "custom_indices": "ints", "cadence": str,
                 "stop_at_first": "bool", "keep_audits": "bool"},
}


def _to_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _convert(kind, value):
    if value is None:
        return None
    if kind == "bool":
        return _to_bool(value)
    if kind in ("ints", "floats"):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        return tuple((int if kind == "ints" else float)(v) for v in value)
    if kind is int and isinstance(value, float) and not value.is_integer():
        raise ConfigError(f"not an integer: {value!r}")
    return kind(value)


def _coerce_section(name: str, values: dict) -> dict:
    schema = SECTIONS[name]
    out = {}
    for key, value in values.items():
        if key not in schema:
            raise ConfigError(f"unknown key {name}.{key}")
        try:
            out[key] = _convert(schema[key], value)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad value for {name}.{key}: {value!r}") from err
    return out


def load_config(path) -> dict:
    """Read an INI config into ``{section: {key: str}}``."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except configparser.Error as err:
        raise ConfigError(f"malformed config {path}: {err}") from err
    return {section: dict(parser[section]) for section in parser.sections()}


def merge_overrides(base: dict, overrides: dict) -> dict:
    """Overlay ``{"section.key": value}`` pairs on a sectioned mapping."""
    out = {name: dict(values) for name, values in base.items()}
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        out.setdefault(section, {})[key] = value
    return out


def resolve_output_dir(configured: Optional[str]) -> str:
    """The environment variable wins over the configured directory."""
    return os.environ.get(OUTPUT_ENV) or configured or "admmguard-out"


# presets: the 1000-problem detection population and the long convergence population
PRESETS = {
    "detection": {"batch": {"n_unattacked": 500, "n_attacked": 500}},
    "convergence": {"batch": {"n_unattacked": 10_000, "n_attacked": 0}, "attack": {"vector": "none"},
                    "detector": {"enabled": False}},
}


# ------------------------------------------------------------------ running


@dataclass(frozen=True)
class ProblemRow:
    id: int
    seed: int
    n: int
    m: int
    p: int
    attacked: bool
    converged: bool
    iterations: int
    verdict: str
    first_detection: Optional[int]
    error: Optional[str] = None

    def csv_values(self) -> list:
        return [self.id, self.seed, self.n, self.m, self.p, int(self.attacked), int(self.converged),
                self.iterations, self.verdict, "" if self.first_detection is None else self.first_detection]


def public_bounds_for(problem: QuadraticProblem, half_width: float) -> tuple[PublicBounds, np.ndarray, np.ndarray]:
    """Public box of half-width ``half_width`` around the central optimum.

    The private box for x is the central half of the public one, which
    leaves a gap for the private-infeasibility attack.
    """
    sol = central_solution(problem)
    bounds = PublicBounds.around(sol.x, sol.z, half_width)
    return bounds, sol.x - 0.5 * half_width, sol.x + 0.5 * half_width


def _attack_for(cfg: BatchConfig, pid: int) -> AttackSpec:
    return replace(cfg.attack, seed=instance_seed(cfg.attack.seed, pid))


def solve_problem(cfg: BatchConfig, problem: QuadraticProblem, spec: Optional[AttackSpec] = None):
    """Aggregator run of one problem with the configured hooks.

    Returns ``(trace, report)``; ``report`` is None with the detector off.
    """
    hooks = Hooks()
    bounds = private_lo = private_hi = None
    needs_bounds = cfg.mitigation or (spec is not None and spec.vector in ("linking_infeasibility", "private_infeasibility"))
    if needs_bounds:
        bounds, private_lo, private_hi = public_bounds_for(problem, cfg.bounds_half_width)
    if spec is not None:
        if spec.vector == "noise_injection":
            hooks.attack = NoiseAttack(spec)
        elif spec.vector == "linking_infeasibility":
            hooks.attack = LinkingAttack(spec, problem, bounds)
        elif spec.vector == "private_infeasibility":
            hooks.attack = PrivateInfeasibilityAttack(spec, private_lo, private_hi, bounds)
        else:
            hooks.x_solver = objective_distortion_attack(problem, spec.scaling, cfg.admm.rho)
        hooks.attack_info = spec.to_dict()
    if cfg.mitigation:
        hooks.mitigator = ProjectionMitigator(problem.link, bounds)
    trace = run_admm(problem, cfg.admm, hooks)
    report = detect(trace, problem.link, cfg.detector) if cfg.detector is not None else None
    return trace, report


def _aggregator_run(cfg: BatchConfig, problem: QuadraticProblem, spec: Optional[AttackSpec]):
    trace, report = solve_problem(cfg, problem, spec)
    return trace.converged, trace.k, report


def _chain_run(cfg: BatchConfig, problem: QuadraticProblem, spec: Optional[AttackSpec]):
    bounds = None
    if cfg.mitigation or spec is not None:
        bounds, private_lo, private_hi = public_bounds_for(problem, cfg.bounds_half_width)
    chain = ChainProblem.from_problem(problem, bounds)
    if spec is not None:
        changes = {"attack": spec}
        if spec.vector == "private_infeasibility":
            changes.update(private_lower=private_lo, private_upper=private_hi)
        chain = chain.with_node(0, **changes)
    run = run_decentralized(chain, cfg.admm, mitigate=cfg.mitigation)
    report = node_audit(run, 1, 0, cfg.detector) if cfg.detector is not None else None
    return run.converged, run.k, report


def run_problem(cfg: BatchConfig, pid: int) -> ProblemRow:
    """Solve and audit problem ``pid``; failures become rows, never exceptions."""
    attacked = pid >= cfg.n_unattacked
    seed = instance_seed(cfg.generator.seed, pid)
    n = m = p = 0
    try:
        problem = generate_instance(cfg.generator, pid)
        n, m, p = problem.n, problem.m, problem.p
        spec = _attack_for(cfg, pid) if attacked else None
        runner = _chain_run if cfg.topology == "chain" else _aggregator_run
        converged, iterations, report = runner(cfg, problem, spec)
    except (NumericalError, AttackInapplicable, ValueError, np.linalg.LinAlgError) as err:
        partial = getattr(err, "partial_trace", None)
        iterations = partial.k if partial is not None else 0
        return ProblemRow(pid, seed, n, m, p, attacked, False, iterations, "failed", None,
                          f"{type(err).__name__}: {err}")
    verdict = "not_run" if report is None else report.verdict
    first = None if report is None else report.first_detection_iterate
    return ProblemRow(pid, seed, n, m, p, attacked, converged, iterations, verdict, first)


def _run_chunk(args) -> list:
    cfg, ids = args
    return [run_problem(cfg, pid) for pid in ids]


@dataclass
class BatchResults:
    config: BatchConfig
    rows: list = field(default_factory=list)

    def cohort(self, attacked: bool) -> list:
        return [r for r in self.rows if r.attacked == attacked]

    def confusion(self) -> dict:
        """``{cohort: (detected, not_detected, total)}``; failed rows count as not detected."""
        out = {}
        for name, flag, size in (("attacked", True, self.config.n_attacked),
                                 ("unattacked", False, self.config.n_unattacked)):
            rows = self.cohort(flag)
            hit = sum(r.verdict == "attack_detected" for r in rows)
            out[name] = (hit, len(rows) - hit, len(rows))
        return out

    def rates(self) -> dict:
        return {name: (d / t if t else float("nan"), nd / t if t else float("nan"))
                for name, (d, nd, t) in self.confusion().items()}

    @property
    def detection_rate(self) -> float:
        return self.rates()["attacked"][0]

    @property
    def false_positive_rate(self) -> float:
        return self.rates()["unattacked"][0]

    def histogram(self) -> list:
        """``(iterations, count_unattacked, count_attacked)`` for every observed count."""
        values = sorted({r.iterations for r in self.rows})
        return [(v, sum(1 for r in self.rows if not r.attacked and r.iterations == v),
                 sum(1 for r in self.rows if r.attacked and r.iterations == v)) for v in values]

    @property
    def failed(self) -> list:
        return [r for r in self.rows if r.error is not None]

    def summary(self) -> dict:
        out = {"requested": self.config.total, "completed": len(self.rows) - len(self.failed),
               "failed": len(self.failed)}
        for name, flag in (("unattacked", False), ("attacked", True)):
            rows = [r for r in self.cohort(flag) if r.error is None]
            its = [r.iterations for r in rows if r.converged]
            out[name] = {
                "total": len(self.cohort(flag)),
                "converged": sum(r.converged for r in rows),
                "median_iterations_converged": float(np.median(its)) if its else None,
                "max_iterations_converged": max(its) if its else None,
            }
        return out


def run_batch(cfg: BatchConfig, progress=None) -> BatchResults:
    """Run every problem of the batch, in parallel when ``workers > 1``.

    Rows are sorted by id, so the result does not depend on scheduling.
    """
    ids = list(range(cfg.total))
    if cfg.workers == 1:
        rows = []
        for pid in ids:
            rows.append(run_problem(cfg, pid))
            if progress is not None:
                progress(len(rows), cfg.total)
    else:
        # small chunks so idle workers pick up the slow (attacked) problems
        size = max(1, min(25, cfg.total // (4 * cfg.workers) or 1))
        chunks = [(cfg, ids[i:i + size]) for i in range(0, len(ids), size)]
        rows = []
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for chunk_rows in pool.map(_run_chunk, chunks):
                rows.extend(chunk_rows)
                if progress is not None:
                    progress(len(rows), cfg.total)
    rows.sort(key=lambda r: r.id)
    return BatchResults(cfg, rows)


# ---------------------------------------------------------------- reporting


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def confusion_csv(results: BatchResults) -> str:
    return _csv_text(("cohort", "detected", "not_detected", "total"),
                     [(name, *counts) for name, counts in results.confusion().items()])


def rates_csv(results: BatchResults) -> str:
    return _csv_text(("cohort", "detected", "not_detected"),
                     [(name, repr(d), repr(nd)) for name, (d, nd) in results.rates().items()])


def rows_csv(results: BatchResults) -> str:
    return _csv_text(ROW_FIELDS, [r.csv_values() for r in results.rows])


def histogram_csv(results: BatchResults) -> str:
    return _csv_text(("iterations", "count_unattacked", "count_attacked"), results.histogram())


def results_json(results: BatchResults) -> str:
    doc = {
        "config": results.config.to_dict(),
        "summary": results.summary(),
        "confusion": {name: dict(zip(("detected", "not_detected", "total"), c))
                      for name, c in results.confusion().items()},
        "failures": [{"id": r.id, "error": r.error} for r in results.failed],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


REPORT_FILES = {
    "confusion.csv": confusion_csv,
    "confusion_rates.csv": rates_csv,
    "problems.csv": rows_csv,
    "iterations_histogram.csv": histogram_csv,
    "results.json": results_json,
}


def emit_report(results: BatchResults, output_dir=None, formats=None) -> list:
    """Write the report files and return their paths.

    ``formats`` selects a subset of ``REPORT_FILES`` by name. The files
    carry no timestamps, so equal results give byte-identical files.
    """
    out = Path(output_dir if output_dir is not None else results.config.output_dir)
    names = list(REPORT_FILES) if formats is None else list(formats)
    for name in names:
        if name not in REPORT_FILES:
            raise ConfigError(f"unknown report format {name!r}")
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for name in names:
            path = out / name
            path.write_text(REPORT_FILES[name](results))
            paths.append(path)
    except OSError as err:
        raise OSError(f"cannot write report to {out}: {err.strerror or err}") from err
    return paths


def replay(results_path) -> BatchResults:
    """Re-run the batch echoed in a ``results.json``."""
    doc = json.loads(Path(results_path).read_text())
    return run_batch(BatchConfig.from_dict(doc["config"]))
