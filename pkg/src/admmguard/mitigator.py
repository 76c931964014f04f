"""Public-bound checks and best-response projection of received x-updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import reachable_x_interval
from .problem import AdmmState, LinkingConstraint, PublicBounds


class MitigationImpossible(ValueError):
    """The feasible set for x is empty, so there is nothing to project onto."""


@dataclass(frozen=True)
class BoundCheck:
    """Result of a bound check; ``violated`` holds 0-based coordinates."""

    violated: tuple

    @property
    def within(self) -> bool:
        return not self.violated


def check_public_bounds(x, bounds: PublicBounds) -> BoundCheck:
    """Report every coordinate of x outside the closed box ``X_pub``."""
    x = np.asarray(x, dtype=float)
    bad = np.flatnonzero((x < bounds.x_lower) | (x > bounds.x_upper) | ~np.isfinite(x))
    return BoundCheck(tuple(int(i) for i in bad))


def feasible_box(link: LinkingConstraint, bounds: PublicBounds) -> tuple[np.ndarray, np.ndarray]:
    """``{x in X_pub : exists z in Z_pub with A x + B z = c}`` as a box.

    Exact for selector constraints with each coordinate in at most one row.
    """
    lo, hi = reachable_x_interval(link, bounds)
    if np.any(lo > hi):
        bad = np.flatnonzero(lo > hi).tolist()
        raise MitigationImpossible(f"feasible set is empty on x coordinates {bad}")
    return lo, hi


def project_best_response(x_received, link: LinkingConstraint, bounds: PublicBounds) -> np.ndarray:
    """Euclidean projection of ``x_received`` onto the feasible box.

    For a box this is a per-coordinate clamp, so feasible inputs come back
    unchanged.
    """
    lo, hi = feasible_box(link, bounds)
    return np.clip(np.asarray(x_received, dtype=float), lo, hi)


class ProjectionMitigator:
    """Mitigator hook: project every received update, flag the ones moved."""

    def __init__(self, link: LinkingConstraint, bounds: PublicBounds):
        self.lo, self.hi = feasible_box(link, bounds)

    def __call__(self, x_received, state: AdmmState, k: int):
        x = np.asarray(x_received, dtype=float)
        x_hat = np.clip(x, self.lo, self.hi)
        return x_hat, bool(np.any(x_hat != x))
