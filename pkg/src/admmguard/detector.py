"""Convexity audit of the x-actor from its observed iterates.

Every honest x-update is an exact minimiser, so the stationarity
condition of round ``i`` pins down a gradient of the x-actor's objective
at the point it reported. Finite differences of ``l + 1`` such
(point, gradient) pairs give an implied Hessian; a convex objective can
only produce a positive semi-definite one. A clearly negative eigenvalue
is evidence that the reported points were not honest minimisers.

Two views are supported:

``full``
    point ``x^i`` and gradient ``-rho A^T (u^i - B (z^i - z_seen^i))``.
    This equals ``2 P x^i + c`` exactly on honest runs, but the
    differences of x only span a p-dimensional subspace when ``p < n``,
    so the conditioning gate rejects every audit unless ``p = n``.
``linked_only``
    point ``A x^i`` and multiplier ``-rho (u^i - B (z^i - z_seen^i))``.
    This is the gradient of ``phi(y) = min {f(x) : A x = y}``, whose
    Hessian is the Schur complement of ``2P`` onto the linked coordinates
    (see :func:`linked_hessian`). Non-linked coordinates go unaudited.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .problem import AdmmTrace, LinkingConstraint, StructureError, selector_descriptor

STRATEGIES = ("evenly_spaced", "most_recent", "anchored", "custom")
VERDICTS = ("attack_detected", "no_attack_detected", "inconclusive")

LINKED_ONLY_CAVEAT = "linked_only audit: non-linked coordinates of x are not audited"


class InsufficientIterates(ValueError):
    """Not enough rounds for an audit of the requested size."""


class CollinearityError(ValueError):
    """Two difference vectors are (numerically) parallel or one is zero."""

    def __init__(self, message: str, pair: tuple):
        super().__init__(message)
        self.pair = pair


class ConditioningError(ValueError):
    def __init__(self, condition: float, kappa_max: float):
        super().__init__(f"difference system condition {condition:.3e} exceeds {kappa_max:.1e}")
        self.condition = condition


@dataclass(frozen=True)
class DetectorConfig:
    """Audit settings.

    Parameters
    ----------
    mode : {"linked_only", "full"}
    psd_tol : float
        Relative eigenvalue tolerance; an audit flags when
        ``lambda_min < -psd_tol * max(1, ||H||_F)``.
    kappa_max : float
        Audits whose difference system has a larger 2-norm condition
        number are discarded as inconclusive.
    collinearity_tol : float
        Reject when ``|cos|`` between two difference vectors exceeds
        ``1 - collinearity_tol``.
    resolution : float
        Reject when a difference vector is shorter than
        ``resolution * max(1, ||y_ref||)``, i.e. below what the iterates
        resolve in floating point.
    strategy : str
        One of ``STRATEGIES``.
    custom_indices : tuple, optional
        Rounds used by the ``custom`` strategy; the last is the reference.
    cadence : {"every", "horizon"}
        Audit after every round from ``l + 2`` on, or once at the end.
    stop_at_first : bool
        Stop auditing once an attack is flagged (the verdict is sticky
        either way).
    keep_audits : bool
        Retain every :class:`HessianEstimate` in the report.
    """

    mode: str = "linked_only"
    psd_tol: float = 1e-6
    kappa_max: float = 1e10
    collinearity_tol: float = 1e-12
    resolution: float = 1e-8
    strategy: str = "evenly_spaced"
    custom_indices: Optional[tuple] = None
    cadence: str = "every"
    stop_at_first: bool = True
    keep_audits: bool = False

    def __post_init__(self):
        if self.mode not in ("linked_only", "full"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.psd_tol < 0:
            raise ValueError("psd_tol must be >= 0")
        if not self.kappa_max > 1:
            raise ValueError("kappa_max must exceed 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "custom" and not self.custom_indices:
            raise ValueError("custom strategy needs custom_indices")
        if self.cadence not in ("every", "horizon"):
            raise ValueError(f"unknown cadence {self.cadence!r}")


@dataclass(frozen=True)
class GradientSample:
    i: int
    point: np.ndarray
    gradient: np.ndarray


@dataclass(frozen=True)
class HessianEstimate:
    k: int
    indices: tuple
    H: np.ndarray
    lambda_min: float
    condition: float
    threshold: float

    @property
    def flagged(self) -> bool:
        return self.lambda_min < -self.threshold


@dataclass
class DetectionReport:
    verdict: str
    first_detection_iterate: Optional[int] = None
    audits_total: int = 0
    audits_accepted: int = 0
    audits_rejected_conditioning: int = 0
    audits_rejected_collinearity: int = 0
    min_lambda_seen: float = float("inf")
    audits: list = field(default_factory=list)
    caveat: Optional[str] = None

    def to_record(self) -> dict:
        return {
            "verdict": self.verdict,
            "first_detection_iterate": self.first_detection_iterate,
            "audits_total": self.audits_total,
            "audits_rejected_conditioning": self.audits_rejected_conditioning,
            "audits_rejected_collinearity": self.audits_rejected_collinearity,
            "min_lambda_seen": None if not np.isfinite(self.min_lambda_seen) else self.min_lambda_seen,
        }

    @property
    def detected(self) -> bool:
        return self.verdict == "attack_detected"


# ---------------------------------------------------------------- gradients


def recover_gradient(trace: AdmmTrace, i: int, link: LinkingConstraint, mode: str = "full") -> GradientSample:
    """Gradient implied by the stationarity of round ``i``.

    Uses ``z_seen`` (the z the x-update was computed against), which is
    ``z^{i-1}`` in the aggregator setting.
    """
    if not 1 <= i <= trace.k:
        raise StructureError(f"round {i} is not in a trace of {trace.k} rounds")
    lam = -trace.rho * (trace.u(i) - link.B @ (trace.z(i) - trace.z_seen(i)))
    x = trace.x(i)
    if mode == "full":
        return GradientSample(i, x, link.A.T @ lam)
    if mode == "linked_only":
        return GradientSample(i, link.A @ x, lam)
    raise ValueError(f"unknown mode {mode!r}")


def gradient_series(trace: AdmmTrace, link: LinkingConstraint, mode: str = "linked_only") -> tuple[np.ndarray, np.ndarray]:
    """Points and gradients for every round, row ``i`` for round ``i``.

    Row 0 is NaN so that round numbers index the arrays directly.
    """
    K = trace.k
    Z = np.vstack([trace.z0] + [e.z for e in trace.entries])
    U = np.vstack([trace.u0] + [e.u for e in trace.entries])
    Zs = np.vstack([trace.z0] + [trace.z_seen(i) for i in range(1, K + 1)])
    lam = -trace.rho * (U - (Z - Zs) @ link.B.T)
    X = np.vstack([np.full(link.A.shape[1], np.nan)] + [e.x for e in trace.entries])
    lam[0] = np.nan
    if mode == "full":
        return X, lam @ link.A
    if mode == "linked_only":
        return X @ link.A.T, lam
    raise ValueError(f"unknown mode {mode!r}")


def linked_hessian(P: np.ndarray, link: LinkingConstraint) -> np.ndarray:
    """Hessian of ``phi(y) = min {x^T P x + c^T x : A x = y}`` for selector A.

    This is the Schur complement of ``2P`` onto the linked coordinates,
    rescaled by the selector coefficients. When every coordinate is
    linked it is ``2P`` itself (up to signs).
    """
    desc = selector_descriptor(link)
    if desc is None:
        raise StructureError("linked Hessian needs a selector A")
    n = P.shape[0]
    L = [row[0] for row in desc]
    a = np.array([row[1] for row in desc])
    F = [j for j in range(n) if j not in set(L)]
    M = 2.0 * np.asarray(P, dtype=float)
    S = M[np.ix_(L, L)]
    if F:
        S = S - M[np.ix_(L, F)] @ np.linalg.pinv(M[np.ix_(F, F)]) @ M[np.ix_(F, L)]
    return S / np.outer(a, a)


# ------------------------------------------------------------ point choice


def _spaced(lo: int, k: int, count: int) -> list:
    return [int(v) for v in np.rint(np.linspace(lo, k, count))]


def _anchored(k: int, count: int) -> Optional[list]:
    # reference k against 2 and floor(k/2), the rest spaced over [k//2, k];
    # with a single comparison point only floor(k/2) is used
    lo = max(3, k // 2)
    if count == 2:
        return [lo, k] if k > lo else None
    if k - lo < count - 2:
        return None
    return [2] + _spaced(lo, k, count - 1)


def audit_windows(k: int, count: int, strategy: str = "evenly_spaced", custom: Optional[Sequence[int]] = None) -> list:
    """All index sets audited at round ``k``. Each ends with its reference.

    ``evenly_spaced`` audits points evenly spaced over ``[2, k]`` and, as
    a second set, the ``anchored`` comparison. ``anchored`` compares the
    reference ``k`` against rounds 2 and ``k // 2`` with any remaining
    points evenly spaced over ``[k // 2, k]``; when only one comparison
    point fits it is ``k // 2``. The close pair is what exposes noise when
    ``l = 1``, and keeping round 2 in larger sets keeps them well
    conditioned.
    """
    if k < count + 1:
        raise InsufficientIterates(f"{count} points need at least {count + 1} rounds, have {k}")
    if strategy == "evenly_spaced":
        sets = [_spaced(2, k, count)]
        extra = _anchored(k, count)
        if extra is not None and extra != sets[0]:
            sets.append(extra)
        return sets
    if strategy == "anchored":
        extra = _anchored(k, count)
        return [extra if extra is not None else _spaced(2, k, count)]
    if strategy == "most_recent":
        return [list(range(k - count + 1, k + 1))]
    if strategy == "custom":
        idx = [int(i) for i in (custom or ())]
        if len(idx) != count:
            raise InsufficientIterates(f"custom strategy needs {count} indices, got {len(idx)}")
        if max(idx) > k or min(idx) < 1:
            raise InsufficientIterates(f"custom indices {idx} outside rounds 1..{k}")
        return [idx]
    raise ValueError(f"unknown strategy {strategy!r}")


def select_points(trace_length: int, count: int, strategy: str = "evenly_spaced", custom: Optional[Sequence[int]] = None) -> list:
    """Primary index set for an audit at round ``trace_length``.

    >>> select_points(10, 3)
    [2, 6, 10]
    """
    return audit_windows(trace_length, count, strategy, custom)[0]


# ---------------------------------------------------------- linear system


def check_differences(dY: np.ndarray, scale: float = 1.0, collinearity_tol: float = 1e-12,
                      resolution: float = 0.0, indices: Optional[Sequence[int]] = None) -> None:
    """Raise :class:`CollinearityError` for zero or parallel difference rows."""
    norms = np.linalg.norm(dY, axis=1)
    labels = list(indices) if indices is not None else list(range(len(dY)))
    floor = resolution * max(1.0, scale)
    for a in range(len(dY)):
        if norms[a] <= floor:
            raise CollinearityError(f"difference for point {labels[a]} vanishes", (labels[a], labels[a]))
    unit = dY / norms[:, None]
    cos = np.abs(unit @ unit.T)
    np.fill_diagonal(cos, 0.0)
    a, b = np.unravel_index(np.argmax(cos), cos.shape)
    if len(dY) > 1 and cos[a, b] > 1.0 - collinearity_tol:
        pair = tuple(sorted((labels[a], labels[b])))
        raise CollinearityError(f"differences for points {pair} are collinear", pair)


def assemble_system(samples: Sequence[GradientSample], reference: GradientSample) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``I_l (x) (x_ref - x_a)^T`` blocks and gradient differences.

    Rows are ordered per comparison point, then per dimension, so that
    ``D @ vec(H) = G`` with ``vec`` row-major.
    """
    l = reference.point.size
    if len(samples) != l:
        raise InsufficientIterates(f"an {l}-dimensional Hessian needs {l} comparison points, got {len(samples)}")
    dY = np.array([reference.point - s.point for s in samples])
    check_differences(dY, indices=[s.i for s in samples])
    D = np.vstack([np.kron(np.eye(l), dy[None, :]) for dy in dY])
    G = np.concatenate([reference.gradient - s.gradient for s in samples])
    return D, G


def _estimate(H: np.ndarray, condition: float, k: int, indices, psd_tol: float) -> HessianEstimate:
    lam = float(np.linalg.eigvalsh(0.5 * (H + H.T))[0])
    return HessianEstimate(k, tuple(indices), H, lam, condition, psd_tol * max(1.0, float(np.linalg.norm(H))))


def solve_hessian(D: np.ndarray, G: np.ndarray, kappa_max: float = 1e10, psd_tol: float = 1e-6,
                  k: int = 0, indices: Sequence[int] = ()) -> HessianEstimate:
    """Solve ``D vec(H) = G`` and take the least eigenvalue of ``(H + H^T) / 2``."""
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise StructureError(f"D must be square, got {D.shape}")
    l = int(round(np.sqrt(D.shape[0])))
    if l * l != D.shape[0]:
        raise StructureError(f"D must be l^2 x l^2, got {D.shape}")
    cond = float(np.linalg.cond(D))
    if not np.isfinite(cond) or cond > kappa_max:
        raise ConditioningError(cond, kappa_max)
    H = np.linalg.solve(D, np.asarray(G, dtype=float)).reshape(l, l)
    return _estimate(H, cond, k, indices, psd_tol)


def _solve_structured(dY: np.ndarray, dG: np.ndarray, kappa_max: float, psd_tol: float, k: int, indices) -> HessianEstimate:
    # D is a row permutation of I_l (x) dY, so cond(D) = cond(dY) and
    # the l^2 system splits into dY H^T = dG.
    cond = float(np.linalg.cond(dY))
    if not np.isfinite(cond) or cond > kappa_max:
        raise ConditioningError(cond, kappa_max)
    H = np.linalg.solve(dY, dG).T
    return _estimate(H, cond, k, indices, psd_tol)


# -------------------------------------------------------------- detection


class _Auditor:
    """Shared audit loop over point/gradient series."""

    def __init__(self, cfg: DetectorConfig, caveat: Optional[str] = None):
        self.cfg = cfg
        self.report = DetectionReport("inconclusive", caveat=caveat)

    def audit(self, Y: np.ndarray, Gr: np.ndarray, k: int) -> bool:
        cfg, rep = self.cfg, self.report
        l = Y.shape[1]
        try:
            windows = audit_windows(k, l + 1, cfg.strategy, cfg.custom_indices)
        except InsufficientIterates:
            return False
        for idx in windows:
            ref, others = idx[-1], idx[:-1]
            rep.audits_total += 1
            dY = Y[ref] - Y[others]
            dG = Gr[ref] - Gr[others]
            try:
                check_differences(dY, float(np.linalg.norm(Y[ref])), cfg.collinearity_tol, cfg.resolution, others)
                est = _solve_structured(dY, dG, cfg.kappa_max, cfg.psd_tol, k, idx)
            except CollinearityError:
                rep.audits_rejected_collinearity += 1
                continue
            except (ConditioningError, np.linalg.LinAlgError):
                rep.audits_rejected_conditioning += 1
                continue
            rep.audits_accepted += 1
            rep.min_lambda_seen = min(rep.min_lambda_seen, est.lambda_min)
            if cfg.keep_audits:
                rep.audits.append(est)
            if est.flagged:
                if rep.first_detection_iterate is None:
                    rep.first_detection_iterate = k
                rep.verdict = "attack_detected"
                if cfg.stop_at_first:
                    return True
            elif rep.verdict == "inconclusive":
                rep.verdict = "no_attack_detected"
        return rep.verdict == "attack_detected"


def detect_series(Y: np.ndarray, Gr: np.ndarray, cfg: DetectorConfig = DetectorConfig(),
                  caveat: Optional[str] = None) -> DetectionReport:
    """Run the configured audits over point/gradient arrays indexed by round."""
    Y, Gr = np.asarray(Y, dtype=float), np.asarray(Gr, dtype=float)
    K = Y.shape[0] - 1
    auditor = _Auditor(cfg, caveat)
    rounds = range(1, K + 1) if cfg.cadence == "every" else [K]
    for k in rounds:
        if auditor.audit(Y, Gr, k) and cfg.stop_at_first:
            break
    return auditor.report


def detect(trace: AdmmTrace, link: LinkingConstraint, cfg: DetectorConfig = DetectorConfig()) -> DetectionReport:
    """Audit a trace using only public data: the link, rho and the iterates.

    ``inconclusive`` means no audit passed the gates (including traces
    shorter than ``l + 2`` rounds).
    """
    Y, Gr = gradient_series(trace, link, cfg.mode)
    caveat = LINKED_ONLY_CAVEAT if cfg.mode == "linked_only" and link.p < link.A.shape[1] else None
    return detect_series(Y, Gr, cfg, caveat)


class OnlineDetector:
    """Detector hook for :func:`run_admm`: audits round ``k`` as it lands.

    Returns True (abort) on the first flagged audit.
    """

    def __init__(self, link: LinkingConstraint, cfg: DetectorConfig = DetectorConfig()):
        if cfg.cadence != "every":
            raise ValueError("online detection needs cadence='every'")
        self.link, self.cfg = link, cfg
        caveat = LINKED_ONLY_CAVEAT if cfg.mode == "linked_only" and link.p < link.A.shape[1] else None
        self._auditor = _Auditor(cfg, caveat)
        l = link.p if cfg.mode == "linked_only" else link.A.shape[1]
        self._Y = [np.full(l, np.nan)]
        self._G = [np.full(l, np.nan)]

    @property
    def report(self) -> DetectionReport:
        return self._auditor.report

    def __call__(self, trace: AdmmTrace) -> bool:
        for i in range(len(self._Y), trace.k + 1):
            s = recover_gradient(trace, i, self.link, self.cfg.mode)
            self._Y.append(s.point)
            self._G.append(s.gradient)
        Y, G = np.array(self._Y), np.array(self._G)
        return self._auditor.audit(Y, G, trace.k)
