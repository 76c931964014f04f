"""Seeded random QP populations.

Dimensions are drawn once per instance; cost terms are redrawn until the
instance passes verification (PSD cost matrices and a combined problem
whose curvature clears ``curvature_floor * S**2``). Redraws are counted in
``problem.meta["retries"]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import compose_central
from .problem import LinkingConstraint, QuadraticProblem, StructureError, is_psd


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    maxdim: int = 10
    scale: float = 1.0
    seed: int = 0
    curvature_floor: float = 0.1
    max_retries: int = 100_000

    def __post_init__(self):
        if self.maxdim < 1:
            raise ValueError("maxdim must be >= 1")
        if self.scale <= 0:
            raise ValueError("scale S must be positive")
        if self.curvature_floor < 0:
            raise ValueError("curvature_floor must be non-negative")


def instance_seed(master_seed: int, index: int) -> int:
    """Order-independent 32-bit seed for instance ``index`` of a population."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def build_selectors(n: int, m: int, p: int, sign_a: float = 1.0, sign_b: float = -1.0) -> LinkingConstraint:
    """A picks the last ``p`` coordinates of x, B the first ``p`` of z, c = 0.

    The default signs make the constraint read ``x_last - z_first = 0``.
    """
    if not (1 <= p <= min(n, m)):
        raise StructureError(f"need 1 <= p <= min(n, m), got n={n}, m={m}, p={p}")
    A = np.zeros((p, n))
    A[:, n - p:] = sign_a * np.eye(p)
    B = np.zeros((p, m))
    B[:, :p] = sign_b * np.eye(p)
    return LinkingConstraint(A, B, np.zeros(p))


def _draw_costs(rng: np.random.Generator, n: int, m: int, S: float):
    L_P = rng.uniform(-S, S, size=(n, n))
    L_Q = rng.uniform(-S, S, size=(m, m))
    c = rng.uniform(-S * S, S * S, size=n)
    d = rng.uniform(-S * S, S * S, size=m)
    return L_P.T @ L_P, c, L_Q.T @ L_Q, d


def generate_problem(cfg: GeneratorConfig = GeneratorConfig(), rng: Optional[np.random.Generator] = None) -> QuadraticProblem:
    """Draw one problem.

    n, m ~ U{1..maxdim}; p ~ U{1..min(n, m)}; ``P = L_P^T L_P`` and
    ``Q = L_Q^T L_Q`` with L entries ~ U[-S, S]; c, d ~ U[-S^2, S^2].
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n = int(rng.integers(1, cfg.maxdim + 1))
    m = int(rng.integers(1, cfg.maxdim + 1))
    p = int(rng.integers(1, min(n, m) + 1))
    link = build_selectors(n, m, p)
    floor = cfg.curvature_floor * cfg.scale**2
    for retries in range(cfg.max_retries + 1):
        P, c, Q, d = _draw_costs(rng, n, m, cfg.scale)
        # L^T L is symmetric up to rounding; force it exactly.
        P = 0.5 * (P + P.T)
        Q = 0.5 * (Q + Q.T)
        if not (is_psd(P) and is_psd(Q)):
            continue
        problem = QuadraticProblem(P, c, Q, d, link, {"retries": retries})
        if floor > 0 and np.linalg.eigvalsh(compose_central(problem).Pi)[0] < floor:
            continue
        return problem
    raise GenerationError(f"no acceptable draw for n={n}, m={m}, p={p} after {cfg.max_retries} retries")


def generate_instance(cfg: GeneratorConfig, index: int) -> QuadraticProblem:
    """Instance ``index`` of the population seeded by ``cfg.seed``."""
    seed = instance_seed(cfg.seed, index)
    problem = generate_problem(cfg, np.random.default_rng(seed))
    meta = dict(problem.meta, seed=seed, index=index, master_seed=cfg.seed)
    return QuadraticProblem(problem.P, problem.c_cost, problem.Q, problem.d_cost, problem.link, meta)
