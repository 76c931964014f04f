"""Problem data, iterate state and ADMM traces.

The two-actor problem is

    min_{x,z}  x^T P x + c^T x + z^T Q z + d^T z
    s.t.       A x + B z = c_link

where the x-actor holds (P, c) privately and the z-actor holds (Q, d).
Everything here is an immutable value; arrays are copied and frozen on
construction so traces can be shared across worker processes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

#: PSD tolerance for cost matrices, relative to the largest eigenvalue.
PSD_TOL = 1e-9

TRACE_FIELDS = ("k", "x", "z", "u", "r_norm", "s_norm", "attacked", "mitigated")


class StructureError(ValueError):
    """Inconsistent dimensions or structure in problem data."""


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    if arr.ndim != ndim:
        raise StructureError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def is_psd(M: np.ndarray, tol: float = PSD_TOL) -> bool:
    """Symmetric and least eigenvalue >= -tol * max(1, largest eigenvalue)."""
    M = np.asarray(M, dtype=float)
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max(initial=0.0))):
        return False
    if M.size == 0:
        return True
    ev = np.linalg.eigvalsh(M)
    return bool(ev[0] >= -tol * max(1.0, ev[-1]))


@dataclass(frozen=True)
class LinkingConstraint:
    """The coupling equation ``A x + B z = c_link``."""

    A: np.ndarray
    B: np.ndarray
    c_link: np.ndarray

    def __post_init__(self):
        A = _frozen(self.A, 2, "A")
        B = _frozen(self.B, 2, "B")
        c = _frozen(self.c_link, 1, "c_link")
        if A.shape[0] != B.shape[0] or A.shape[0] != c.shape[0]:
            raise StructureError(
                f"row mismatch: A {A.shape}, B {B.shape}, c_link {c.shape}"
            )
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c_link", c)

    @property
    def p(self) -> int:
        return self.A.shape[0]

    def residual(self, x, z) -> np.ndarray:
        return self.A @ x + self.B @ z - self.c_link


@dataclass(frozen=True)
class QuadraticProblem:
    """Separable QP with a single linking constraint.

    ``meta`` carries provenance only (seed, instance index, generator
    retries) and never affects numerics.
    """

    P: np.ndarray
    c_cost: np.ndarray
    Q: np.ndarray
    d_cost: np.ndarray
    link: LinkingConstraint
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        P = _frozen(self.P, 2, "P")
        Q = _frozen(self.Q, 2, "Q")
        c = _frozen(self.c_cost, 1, "c_cost")
        d = _frozen(self.d_cost, 1, "d_cost")
        n, m = c.shape[0], d.shape[0]
        if P.shape != (n, n) or Q.shape != (m, m):
            raise StructureError(f"P {P.shape} / Q {Q.shape} inconsistent with n={n}, m={m}")
        if self.link.A.shape[1] != n or self.link.B.shape[1] != m:
            raise StructureError(
                f"link A {self.link.A.shape} / B {self.link.B.shape} inconsistent with n={n}, m={m}"
            )
        if not 1 <= self.link.p <= min(n, m):
            raise StructureError(f"need 1 <= p <= min(n, m), got p={self.link.p}")
        for name, M in (("P", P), ("Q", Q)):
            if not is_psd(M):
                raise StructureError(f"{name} is not symmetric positive semi-definite")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "c_cost", c)
        object.__setattr__(self, "d_cost", d)

    @property
    def n(self) -> int:
        return self.c_cost.shape[0]

    @property
    def m(self) -> int:
        return self.d_cost.shape[0]

    @property
    def p(self) -> int:
        return self.link.p

    def f(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.P @ x + self.c_cost @ x)

    def g(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(z @ self.Q @ z + self.d_cost @ z)

    def objective(self, x, z) -> float:
        return self.f(x) + self.g(z)

    def grad_f(self, x) -> np.ndarray:
        return 2.0 * self.P @ x + self.c_cost

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "p": self.p,
            "P": self.P.tolist(),
            "c": self.c_cost.tolist(),
            "Q": self.Q.tolist(),
            "d": self.d_cost.tolist(),
            "A": self.link.A.tolist(),
            "B": self.link.B.tolist(),
            "c_link": self.link.c_link.tolist(),
            "selectors": selector_descriptor(self.link),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QuadraticProblem":
        link = LinkingConstraint(
            np.array(data["A"], dtype=float).reshape(data["p"], data["n"]),
            np.array(data["B"], dtype=float).reshape(data["p"], data["m"]),
            data["c_link"],
        )
        return cls(data["P"], data["c"], data["Q"], data["d"], link, dict(data.get("meta", {})))


def selector_descriptor(link: LinkingConstraint) -> Optional[list]:
    """Per-row ``[x_col, a, z_col, b]`` when A and B are coordinate selectors, else None."""
    rows = []
    for a_row, b_row in zip(link.A, link.B):
        ja, jb = np.flatnonzero(a_row), np.flatnonzero(b_row)
        if ja.size != 1 or jb.size != 1:
            return None
        rows.append([int(ja[0]), float(a_row[ja[0]]), int(jb[0]), float(b_row[jb[0]])])
    return rows


def save_problem(problem: QuadraticProblem, path) -> None:
    Path(path).write_text(json.dumps(problem.to_dict(), indent=1) + "\n")


def load_problem(path) -> QuadraticProblem:
    return QuadraticProblem.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PublicBounds:
    """Publicly known interval supersets ``X_pub`` and ``Z_pub``.

    Infinite entries mean the coordinate is unbounded. ``x_public`` marks
    which x-coordinates are visible to the auditor; ``None`` means all.
    """

    x_lower: np.ndarray
    x_upper: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray
    x_public: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("x_lower", "x_upper", "z_lower", "z_upper"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 1, name))
        if self.x_lower.shape != self.x_upper.shape or self.z_lower.shape != self.z_upper.shape:
            raise StructureError("lower/upper bound shapes differ")
        if np.any(self.x_lower > self.x_upper) or np.any(self.z_lower > self.z_upper):
            raise StructureError("lower bound exceeds upper bound")
        if self.x_public is not None:
            mask = np.array(self.x_public, dtype=bool)
            if mask.shape != self.x_lower.shape:
                raise StructureError("x_public mask has the wrong length")
            mask.setflags(write=False)
            object.__setattr__(self, "x_public", mask)

    @classmethod
    def unbounded(cls, n: int, m: int) -> "PublicBounds":
        return cls(np.full(n, -np.inf), np.full(n, np.inf), np.full(m, -np.inf), np.full(m, np.inf))

    @classmethod
    def around(cls, x_center, z_center, half_width: float) -> "PublicBounds":
        """Boxes of the given half-width centred on a point."""
        x_center = np.asarray(x_center, dtype=float)
        z_center = np.asarray(z_center, dtype=float)
        return cls(x_center - half_width, x_center + half_width, z_center - half_width, z_center + half_width)

    def contains_x(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.x_lower) and np.all(x <= self.x_upper))

    def contains_z(self, z) -> bool:
        z = np.asarray(z)
        return bool(np.all(z >= self.z_lower) and np.all(z <= self.z_upper))


@dataclass(frozen=True)
class AdmmState:
    """Iterate state after ``k`` completed rounds. ``u`` is the scaled dual."""

    x: Optional[np.ndarray]
    z: np.ndarray
    u: np.ndarray
    k: int = 0

    def y(self, rho: float) -> np.ndarray:
        """Unscaled dual ``rho * u``."""
        return rho * self.u


def primal_residual(state: AdmmState, link: LinkingConstraint) -> np.ndarray:
    """``A x + B z - c_link`` for the given state."""
    if state.x is None:
        raise StructureError("state has no x iterate")
    x, z = np.asarray(state.x, dtype=float), np.asarray(state.z, dtype=float)
    if x.shape != (link.A.shape[1],) or z.shape != (link.B.shape[1],):
        raise StructureError(f"x {x.shape} / z {z.shape} do not match A {link.A.shape}, B {link.B.shape}")
    return link.A @ x + link.B @ z - link.c_link


def dual_residual(z_new, z_old, link: LinkingConstraint, rho: float) -> np.ndarray:
    """``rho * A^T B (z_new - z_old)``."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    z_new, z_old = np.asarray(z_new, dtype=float), np.asarray(z_old, dtype=float)
    if z_new.shape != z_old.shape or z_new.shape != (link.B.shape[1],):
        raise StructureError(f"z shapes {z_new.shape}, {z_old.shape} do not match B {link.B.shape}")
    return rho * (link.A.T @ (link.B @ (z_new - z_old)))


@dataclass(frozen=True)
class TraceEntry:
    """One completed round.

    ``x`` is the value the z-update consumed (after any attack and
    mitigation). ``x_honest`` and ``x_sent`` are simulation-side ground
    truth and are not serialized. ``z_seen`` is the z value the x-update
    used; ``None`` means the previous entry's z.
    """

    k: int
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    r: np.ndarray
    s: np.ndarray
    attacked: bool = False
    mitigated: bool = False
    x_honest: Optional[np.ndarray] = None
    x_sent: Optional[np.ndarray] = None
    z_seen: Optional[np.ndarray] = None

    @property
    def r_norm(self) -> float:
        return float(np.linalg.norm(self.r))

    @property
    def s_norm(self) -> float:
        return float(np.linalg.norm(self.s))

    def to_record(self) -> dict:
        return {
            "k": self.k,
            "x": self.x.tolist(),
            "z": self.z.tolist(),
            "u": self.u.tolist(),
            "r_norm": self.r_norm,
            "s_norm": self.s_norm,
            "attacked": bool(self.attacked),
            "mitigated": bool(self.mitigated),
        }


@dataclass(frozen=True)
class AdmmTrace:
    """Full iterate history of one run.

    ``entries[i]`` holds round ``i + 1``; the initial ``z0`` and ``u0``
    are kept separately so that ``z(0)`` and ``u(0)`` are defined.
    """

    entries: tuple
    rho: float
    z0: np.ndarray
    u0: np.ndarray
    termination: str
    problem: Optional[QuadraticProblem] = None
    attack: Optional[dict] = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def k(self) -> int:
        """Index of the last recorded round."""
        return len(self.entries)

    @property
    def converged(self) -> bool:
        return self.termination == "converged"

    def entry(self, i: int) -> TraceEntry:
        if not 1 <= i <= len(self.entries):
            raise IndexError(f"round {i} not in trace of length {len(self.entries)}")
        return self.entries[i - 1]

    def x(self, i: int) -> np.ndarray:
        return self.entry(i).x

    def z(self, i: int) -> np.ndarray:
        return self.z0 if i == 0 else self.entry(i).z

    def u(self, i: int) -> np.ndarray:
        return self.u0 if i == 0 else self.entry(i).u

    def z_seen(self, i: int) -> np.ndarray:
        """The z value the x-update of round ``i`` was computed against."""
        e = self.entry(i)
        return self.z(i - 1) if e.z_seen is None else e.z_seen

    def prefix(self, k: int) -> "AdmmTrace":
        return AdmmTrace(self.entries[:k], self.rho, self.z0, self.u0, "in-progress", self.problem, self.attack)

    @property
    def xs(self) -> np.ndarray:
        return np.array([e.x for e in self.entries])

    @property
    def r_norms(self) -> np.ndarray:
        return np.array([e.r_norm for e in self.entries])

    @property
    def s_norms(self) -> np.ndarray:
        return np.array([e.s_norm for e in self.entries])

    def final(self) -> TraceEntry:
        return self.entries[-1]


def write_trace(trace: AdmmTrace, path) -> None:
    """Line-delimited JSON, one record per round, fields in ``TRACE_FIELDS`` order.

    Round 0 carries the initial ``z0``/``u0`` with ``x`` and the norms null.
    """
    lines = [
        json.dumps(
            {"k": 0, "x": None, "z": trace.z0.tolist(), "u": trace.u0.tolist(),
             "r_norm": None, "s_norm": None, "attacked": False, "mitigated": False}
        )
    ]
    lines.extend(json.dumps(e.to_record()) for e in trace.entries)
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path, link: LinkingConstraint, rho: float, problem: Optional[QuadraticProblem] = None) -> AdmmTrace:
    """Rebuild a trace written by :func:`write_trace`.

    Residual vectors are recomputed from the stored iterates; the stored
    norms are checked against them.
    """
    records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not records or records[0]["k"] != 0:
        raise StructureError("trace file must start with the round-0 record")
    z0 = _frozen(records[0]["z"], 1, "z0")
    u0 = _frozen(records[0]["u"], 1, "u0")
    entries = []
    z_prev = z0
    for expected_k, rec in enumerate(records[1:], start=1):
        if rec["k"] != expected_k:
            raise StructureError(f"trace rounds must be contiguous: expected {expected_k}, got {rec['k']}")
        x, z, u = (_frozen(rec[key], 1, key) for key in ("x", "z", "u"))
        r = link.residual(x, z)
        s = dual_residual(z, z_prev, link, rho)
        if not np.isclose(np.linalg.norm(r), rec["r_norm"], rtol=1e-12, atol=1e-300):
            raise StructureError(f"stored r_norm disagrees with iterates at round {expected_k}")
        entries.append(TraceEntry(expected_k, x, z, u, r, s, rec["attacked"], rec["mitigated"]))
        z_prev = z
    return AdmmTrace(tuple(entries), rho, z0, u0, "unknown", problem)

