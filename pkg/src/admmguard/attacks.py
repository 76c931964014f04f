"""Attack vectors against the x-update.

Each attack is a pure transformation of the honest update. Randomised
attacks draw from a stream keyed on ``(seed, k)`` so any round can be
replayed on its own.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .engine import AnalyticUpdates
from .problem import AdmmState, LinkingConstraint, PublicBounds, QuadraticProblem, selector_descriptor

VECTORS = ("noise_injection", "private_infeasibility", "linking_infeasibility", "objective_distortion")


class AttackInapplicable(ValueError):
    """The requested attack cannot be realised with the available bounds."""


@dataclass(frozen=True)
class AttackSpec:
    vector: str = "noise_injection"
    magnitude: float = 0.10
    distribution: str = "bernoulli_sign"
    start_iteration: int = 1
    seed: int = 0
    margin: float = 0.10  # linking_infeasibility: fraction of bound width
    mode: str = "outside_pub"  # private_infeasibility
    side: str = "upper"  # linking_infeasibility
    scaling: float = 4.0  # objective_distortion

    def __post_init__(self):
        if self.vector not in VECTORS:
            raise ValueError(f"unknown attack vector {self.vector!r}")
        if self.magnitude <= 0:
            raise ValueError("magnitude must be positive")
        if self.distribution not in ("bernoulli_sign", "uniform"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.start_iteration < 1:
            raise ValueError("start_iteration must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def round_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(k)])


def noise_attack(x_star, spec: AttackSpec, k: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Zero-mean multiplicative noise, fresh per entry and per round.

    ``bernoulli_sign``: each entry scaled by ``1 + s * magnitude`` with a
    fair sign ``s``. ``uniform``: scaled by ``1 + U(-magnitude, magnitude)``.
    """
    x_star = np.asarray(x_star, dtype=float)
    rng = rng if rng is not None else round_rng(spec.seed, k)
    if spec.distribution == "bernoulli_sign":
        factors = rng.choice((-1.0, 1.0), size=x_star.shape)
    else:
        factors = rng.uniform(-1.0, 1.0, size=x_star.shape)
    return x_star * (1.0 + spec.magnitude * factors)


def reachable_x_interval(link: LinkingConstraint, bounds: PublicBounds) -> tuple[np.ndarray, np.ndarray]:
    """Box of x values for which some z in Z_pub satisfies the link.

    Non-linked coordinates are bounded by X_pub only; a linked coordinate
    ``x_i`` tied to ``z_j`` through ``a x_i + b z_j = c`` is further limited
    to the image of ``[z_lo, z_hi]`` under ``x_i = (c - b z_j) / a``.
    """
    desc = selector_descriptor(link)
    if desc is None:
        raise AttackInapplicable("reachable set is only closed-form for selector constraints")
    lo = np.array(bounds.x_lower, dtype=float)
    hi = np.array(bounds.x_upper, dtype=float)
    for row, (xi, a, zj, b) in enumerate(desc):
        c = link.c_link[row]
        ends = np.array([(c - b * bounds.z_lower[zj]) / a, (c - b * bounds.z_upper[zj]) / a])
        lo[xi] = max(lo[xi], np.nanmin(ends))
        hi[xi] = min(hi[xi], np.nanmax(ends))
    return lo, hi


def displace_outside(x_star, link: LinkingConstraint, bounds: PublicBounds, margin: float = 0.10,
                     side: str = "upper") -> np.ndarray:
    """Move every linked coordinate of x just outside its reachable interval.

    The coordinate exits by ``margin`` times the interval width through
    the upper or lower end, or through the end nearer the honest value
    (``side="nearest"``).
    """
    if side not in ("upper", "lower", "nearest"):
        raise ValueError(f"unknown side {side!r}")
    if margin <= 0:
        raise ValueError("margin must be positive: the update has to leave the reachable set")
    desc = selector_descriptor(link)
    if desc is None:
        raise AttackInapplicable("linking attack needs selector constraints")
    for xi, a, zj, b in desc:
        if not (np.isfinite(bounds.z_lower[zj]) and np.isfinite(bounds.z_upper[zj])):
            raise AttackInapplicable(f"Z_pub is unbounded on linked coordinate z[{zj}]")
    lo, hi = reachable_x_interval(link, bounds)
    x = np.array(x_star, dtype=float)
    for xi, *_ in desc:
        width = hi[xi] - lo[xi]
        step = margin * width if width > 0 else margin
        up = side == "upper" or (side == "nearest" and x[xi] >= 0.5 * (lo[xi] + hi[xi]))
        x[xi] = hi[xi] + step if up else lo[xi] - step
    return x


def linking_infeasibility_attack(x_star, problem: QuadraticProblem, bounds: PublicBounds, margin: float = 0.10,
                                 side: str = "upper") -> np.ndarray:
    """Send an x for which no z in Z_pub satisfies the linking constraint."""
    return displace_outside(x_star, problem.link, bounds, margin, side)


def private_infeasibility_attack(x_star, private_lower, private_upper, bounds: PublicBounds,
                                 mode: str = "outside_pub", margin: float = 0.10) -> np.ndarray:
    """Move the update off the private set X.

    ``inside_pub`` lands in the gap ``X_pub \\ X`` (midpoint of the gap),
    which no bound check can see. ``outside_pub`` mirrors that point across
    the public bound, leaving ``X_pub``; with no gap it steps ``margin``
    times the public width beyond the bound.
    """
    if mode not in ("inside_pub", "outside_pub"):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.array(x_star, dtype=float)
    lo, hi = np.asarray(private_lower, dtype=float), np.asarray(private_upper, dtype=float)
    plo, phi = bounds.x_lower, bounds.x_upper
    upper_gap = phi - hi
    lower_gap = lo - plo
    moved = False
    for i in range(x.size):
        if upper_gap[i] > 0 and np.isfinite(phi[i]):
            inside = 0.5 * (hi[i] + phi[i])
            x[i] = inside if mode == "inside_pub" else phi[i] + 0.5 * upper_gap[i]
            moved = True
        elif lower_gap[i] > 0 and np.isfinite(plo[i]):
            inside = 0.5 * (lo[i] + plo[i])
            x[i] = inside if mode == "inside_pub" else plo[i] - 0.5 * lower_gap[i]
            moved = True
        elif mode == "outside_pub" and np.isfinite(phi[i]):
            x[i] = phi[i] + margin * max(phi[i] - plo[i], 1.0) if np.isfinite(plo[i]) else phi[i] + margin
            moved = True
    if not moved:
        if mode == "inside_pub":
            raise AttackInapplicable("X equals X_pub: no undetectable gap to exploit")
        raise AttackInapplicable("X_pub is unbounded: nothing lies outside it")
    return x


def objective_distortion_attack(problem: QuadraticProblem, scaling: float, rho: float):
    """x-update that minimises ``x^T (scaling P) x + c^T x`` plus the penalty.

    Returns a closure ``(z, u) -> x`` usable as ``Hooks.x_solver``.
    """
    if scaling <= 0:
        raise ValueError("scaling must be positive so the distorted objective stays convex")
    distorted = QuadraticProblem(scaling * problem.P, problem.c_cost, problem.Q, problem.d_cost, problem.link)
    return AnalyticUpdates(distorted, rho).x


class NoiseAttack:
    """Hook wrapper for :func:`noise_attack`."""

    def __init__(self, spec: AttackSpec):
        self.spec = spec

    def __call__(self, x_star, state: AdmmState, k: int):
        if k < self.spec.start_iteration:
            return x_star
        return noise_attack(x_star, self.spec, k)


class LinkingAttack:
    def __init__(self, spec: AttackSpec, problem: QuadraticProblem, bounds: PublicBounds):
        self.spec, self.problem, self.bounds = spec, problem, bounds
        # fail early rather than mid-run
        linking_infeasibility_attack(np.zeros(problem.n), problem, bounds, spec.margin, spec.side)

    def __call__(self, x_star, state: AdmmState, k: int):
        if k < self.spec.start_iteration:
            return x_star
        return linking_infeasibility_attack(x_star, self.problem, self.bounds, self.spec.margin, self.spec.side)


class PrivateInfeasibilityAttack:
    def __init__(self, spec: AttackSpec, private_lower, private_upper, bounds: PublicBounds):
        self.spec = spec
        self.lower, self.upper, self.bounds = private_lower, private_upper, bounds

    def __call__(self, x_star, state: AdmmState, k: int):
        if k < self.spec.start_iteration:
            return x_star
        return private_infeasibility_attack(x_star, self.lower, self.upper, self.bounds, self.spec.mode, self.spec.margin)
