"""Scaled-form ADMM with analytic QP updates and a central oracle.

Round ``k`` computes the x-update against ``(z^{k-1}, u^{k-1})``, passes
it through the optional attack and mitigation hooks, then runs the
z-update and the dual update. The engine plays the aggregator: it
trusts z and u and records everything needed to audit x afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg

from .problem import (
    AdmmState,
    AdmmTrace,
    LinkingConstraint,
    QuadraticProblem,
    StructureError,
    TraceEntry,
    dual_residual,
    primal_residual,
    selector_descriptor,
)


class NumericalError(RuntimeError):
    """A linear system in an update or in the oracle could not be solved.

    ``partial_trace`` is attached when the failure happens mid-run.
    """

    def __init__(self, message: str, condition: float = np.inf, partial_trace: Optional[AdmmTrace] = None):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition
        self.partial_trace = partial_trace


@dataclass(frozen=True)
class AdmmConfig:
    rho: float = 1.0
    eps_pri: float = 1e-10
    eps_dual: float = 1e-10
    max_iterations: int = 500
    z0: Optional[tuple] = None  # None -> all ones
    u0: Optional[tuple] = None  # None -> zeros

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.eps_pri <= 0 or self.eps_dual <= 0:
            raise ValueError("convergence thresholds must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")

    def initial(self, m: int, p: int) -> tuple[np.ndarray, np.ndarray]:
        z0 = np.ones(m) if self.z0 is None else np.array(self.z0, dtype=float)
        u0 = np.zeros(p) if self.u0 is None else np.array(self.u0, dtype=float)
        if z0.shape != (m,) or u0.shape != (p,):
            raise StructureError(f"initial z0 {z0.shape} / u0 {u0.shape} do not match m={m}, p={p}")
        return z0, u0


AttackHook = Callable[[np.ndarray, AdmmState, int], np.ndarray]
MitigatorHook = Callable[[np.ndarray, AdmmState, int], "tuple[np.ndarray, bool]"]
DetectorHook = Callable[[AdmmTrace], bool]
XSolver = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class Hooks:
    """Optional per-round interventions.

    ``attack(x_star, state, k)`` returns the value the x-actor sends.
    ``mitigator(x_received, state, k)`` returns ``(x_used, flagged)``.
    ``detector(trace_so_far)`` returns True to abort the run.
    ``x_solver(z, u)`` replaces the honest x-update (objective distortion).
    """

    attack: Optional[AttackHook] = None
    mitigator: Optional[MitigatorHook] = None
    detector: Optional[DetectorHook] = None
    x_solver: Optional[XSolver] = None
    attack_info: Optional[dict] = field(default=None)


def _factor(M: np.ndarray, what: str):
    try:
        return linalg.cho_factor(M, lower=False, check_finite=True)
    except linalg.LinAlgError:
        raise NumericalError(f"{what} is not positive definite", float(np.linalg.cond(M))) from None


class AnalyticUpdates:
    """Pre-factored x- and z-updates for one problem and penalty.

    Both system matrices are iterate-independent, so each is Cholesky
    factored once.
    """

    def __init__(self, problem: QuadraticProblem, rho: float):
        if rho <= 0:
            raise ValueError("rho must be positive")
        self.problem = problem
        self.rho = rho
        link = problem.link
        self._A, self._B, self._c = link.A, link.B, link.c_link
        self._x_fac = _factor(2.0 * problem.P + rho * self._A.T @ self._A, "2P + rho A^T A")
        self._z_fac = _factor(2.0 * problem.Q + rho * self._B.T @ self._B, "2Q + rho B^T B")

    def x(self, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        gamma = self._B @ z - self._c + u
        return linalg.cho_solve(self._x_fac, -self.problem.c_cost - self.rho * (self._A.T @ gamma))

    def z(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        mu = self._A @ x - self._c + u
        return linalg.cho_solve(self._z_fac, -self.problem.d_cost - self.rho * (self._B.T @ mu))


def x_update(problem: QuadraticProblem, z, u, rho: float) -> np.ndarray:
    """Exact minimiser of ``f(x) + rho/2 ||A x + B z - c + u||^2``."""
    return AnalyticUpdates(problem, rho).x(np.asarray(z, dtype=float), np.asarray(u, dtype=float))


def z_update(problem: QuadraticProblem, x, u, rho: float) -> np.ndarray:
    """Exact minimiser of ``g(z) + rho/2 ||A x + B z - c + u||^2``."""
    return AnalyticUpdates(problem, rho).z(np.asarray(x, dtype=float), np.asarray(u, dtype=float))


def u_update(u, x, z, link: LinkingConstraint) -> np.ndarray:
    return np.asarray(u, dtype=float) + primal_residual(AdmmState(np.asarray(x, dtype=float), np.asarray(z, dtype=float), u), link)


def run_admm(problem: QuadraticProblem, cfg: AdmmConfig = AdmmConfig(), hooks: Optional[Hooks] = None) -> AdmmTrace:
    """Run ADMM until both residual norms pass their thresholds.

    Terminates with reason ``converged``, ``iteration-cap`` or
    ``detector-abort``. On a numerical failure the partial trace is
    attached to the raised :class:`NumericalError`.
    """
    hooks = hooks or Hooks()
    link = problem.link
    z, u = cfg.initial(problem.m, problem.p)
    z0, u0 = z.copy(), u.copy()
    z0.setflags(write=False)
    u0.setflags(write=False)
    entries: list[TraceEntry] = []

    def snapshot(termination: str) -> AdmmTrace:
        return AdmmTrace(tuple(entries), cfg.rho, z0, u0, termination, problem, hooks.attack_info)

    try:
        updates = AnalyticUpdates(problem, cfg.rho)
    except NumericalError as err:
        err.partial_trace = snapshot("numerical-failure")
        raise
    x_solver = hooks.x_solver or updates.x

    termination = "iteration-cap"
    for k in range(1, cfg.max_iterations + 1):
        state = AdmmState(None, z, u, k - 1)
        x_star = x_solver(z, u)
        x_sent = x_star
        if hooks.attack is not None:
            x_sent = np.asarray(hooks.attack(x_star, state, k), dtype=float)
        attacked = x_sent is not x_star
        x_used, mitigated = x_sent, False
        if hooks.mitigator is not None:
            x_used, mitigated = hooks.mitigator(x_sent, state, k)
            x_used = np.asarray(x_used, dtype=float)
        z_new = updates.z(x_used, u)
        if not (np.all(np.isfinite(x_used)) and np.all(np.isfinite(z_new))):
            raise NumericalError(f"non-finite iterate at round {k}", partial_trace=snapshot("numerical-failure"))
        new_state = AdmmState(x_used, z_new, u, k)
        r = primal_residual(new_state, link)
        u_new = u + r
        s = dual_residual(z_new, z, link, cfg.rho)
        for arr in (x_used, z_new, u_new, r, s):
            arr.setflags(write=False)
        entries.append(
            TraceEntry(k, x_used, z_new, u_new, r, s, attacked, bool(mitigated),
                       x_honest=x_star, x_sent=x_sent)
        )
        z, u = z_new, u_new
        if hooks.detector is not None and hooks.detector(snapshot("in-progress")):
            termination = "detector-abort"
            break
        if np.linalg.norm(r) <= cfg.eps_pri and np.linalg.norm(s) <= cfg.eps_dual:
            termination = "converged"
            break
    return snapshot(termination)


def recompute_duals(trace: AdmmTrace, link: LinkingConstraint) -> np.ndarray:
    """Replay the dual recurrence from the stored x and z iterates.

    This is the check an aggregator can run to verify every ``u^i``.
    """
    u = np.array(trace.u0, dtype=float)
    out = []
    for e in trace.entries:
        u = u + (link.A @ e.x + link.B @ e.z - link.c_link)
        out.append(u)
    return np.array(out)


@dataclass(frozen=True)
class CentralQP:
    """``min_w w^T Pi w + kappa^T w`` with ``(x, z) = (T_x w, T_z w)``."""

    Pi: np.ndarray
    kappa: np.ndarray
    T_x: np.ndarray
    T_z: np.ndarray


@dataclass(frozen=True)
class CentralSolution:
    w: np.ndarray
    x: np.ndarray
    z: np.ndarray
    qp: CentralQP
    condition: float


def compose_central(problem: QuadraticProblem) -> CentralQP:
    """Fold the linking constraint into a single unconstrained QP.

    Requires selector A and B (one nonzero per row) with ``c_link = 0``.
    The combined variable is ``w = (x, z_free)``; each linked z coordinate
    is eliminated through ``z_j = -(a / b) x_i``. With the generator's
    layout (A picks the last p of x, B the first p of z with opposite
    sign) this is exactly the block structure

        Pi = [[P00, P01, 0], [P10, P11 + Q00, Q01], [0, Q10, Q11]]
        kappa = [c0, c1 + d0, d1].
    """
    desc = selector_descriptor(problem.link)
    if desc is None:
        raise StructureError("central oracle needs selector-structured A and B")
    if np.any(problem.link.c_link != 0):
        raise StructureError("central oracle needs c_link = 0")
    n, m = problem.n, problem.m
    z_cols = [row[2] for row in desc]
    x_cols = [row[0] for row in desc]
    if len(set(z_cols)) != len(z_cols) or len(set(x_cols)) != len(x_cols):
        raise StructureError("each coordinate may appear in at most one linking row")
    free_z = [j for j in range(m) if j not in set(z_cols)]
    N = n + len(free_z)
    T_x = np.zeros((n, N))
    T_x[:, :n] = np.eye(n)
    T_z = np.zeros((m, N))
    for xi, a, zj, b in desc:
        T_z[zj, xi] = -a / b
    for pos, zj in enumerate(free_z):
        T_z[zj, n + pos] = 1.0
    Pi = T_x.T @ problem.P @ T_x + T_z.T @ problem.Q @ T_z
    kappa = T_x.T @ problem.c_cost + T_z.T @ problem.d_cost
    return CentralQP(Pi, kappa, T_x, T_z)


def central_solution(problem: QuadraticProblem) -> CentralSolution:
    """Solve the composed QP: ``w* = -1/2 Pi^{-1} kappa``."""
    qp = compose_central(problem)
    cond = float(np.linalg.cond(qp.Pi))
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericalError("central cost matrix Pi is singular", cond)
    w = -0.5 * np.linalg.solve(qp.Pi.T, qp.kappa)
    return CentralSolution(w, qp.T_x @ w, qp.T_z @ w, qp, cond)
