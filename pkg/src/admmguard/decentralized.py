"""ADMM on a chain of nodes without an aggregator.

Nodes sit on a path ``0 - 1 - ... - N-1``; edge ``e`` joins nodes ``e`` and
``e + 1`` through ``M_left v_e + M_right v_{e+1} = c_e``. Each round the
even-indexed nodes update first, then the odd-indexed ones, so the chain
is two-block ADMM over the two colour classes. Every node keeps its own
copy of each incident edge's scaled dual and advances it from the values
it has itself observed. With two nodes this is exactly the
aggregator-coordinated recurrence.

A node only ever reads its own state and the messages its immediate
neighbours sent; :class:`ChainRun` stores those messages per receiver so
the per-node views used for auditing can be rebuilt from them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .attacks import AttackSpec, displace_outside, noise_attack, private_infeasibility_attack
from .detector import DetectionReport, DetectorConfig, detect
from .engine import AdmmConfig, NumericalError
from .problem import (
    AdmmTrace,
    LinkingConstraint,
    PublicBounds,
    QuadraticProblem,
    StructureError,
    TraceEntry,
    _frozen,
    is_psd,
)

LOCALIZATION_CAVEAT = "the source may be this neighbour or any node upstream of it"

#: Capability matrix a fully-decentralized chain can realise, per attack.
DECENTRALIZED_CAPABILITIES = {
    "private_infeasibility": {"detect": False, "localize": False, "mitigate": False},
    "linking_infeasibility": {"detect": True, "localize": True, "mitigate": False},
    "noise_injection": {"detect": True, "localize": False, "mitigate": False},
}


@dataclass(frozen=True)
class NodeSpec:
    """One node: private cost ``v^T P v + c^T v`` plus public interval bounds.

    ``private_lower``/``private_upper`` describe the true set X and are only
    used by the private-infeasibility attack. ``dual_lying`` makes an
    attacking node advance its own dual copies with its honest value
    instead of the value it sent.
    """

    name: str
    P: np.ndarray
    c: np.ndarray
    public_lower: Optional[np.ndarray] = None
    public_upper: Optional[np.ndarray] = None
    private_lower: Optional[np.ndarray] = None
    private_upper: Optional[np.ndarray] = None
    attack: Optional[AttackSpec] = None
    dual_lying: bool = False

    def __post_init__(self):
        P = _frozen(self.P, 2, "P")
        c = _frozen(self.c, 1, "c")
        n = c.shape[0]
        if P.shape != (n, n) or not is_psd(P):
            raise StructureError(f"node {self.name}: P must be a symmetric PSD {n}x{n} matrix")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "c", c)
        for name, default in (("public_lower", -np.inf), ("public_upper", np.inf),
                              ("private_lower", -np.inf), ("private_upper", np.inf)):
            val = getattr(self, name)
            arr = _frozen(np.full(n, default) if val is None else val, 1, name)
            if arr.shape != (n,):
                raise StructureError(f"node {self.name}: {name} has the wrong length")
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.c.shape[0]


@dataclass(frozen=True)
class EdgeSpec:
    """``M_left v_left + M_right v_right = c`` between adjacent nodes."""

    M_left: np.ndarray
    M_right: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        link = LinkingConstraint(self.M_left, self.M_right, self.c)
        object.__setattr__(self, "M_left", link.A)
        object.__setattr__(self, "M_right", link.B)
        object.__setattr__(self, "c", link.c_link)


@dataclass(frozen=True)
class ChainProblem:
    nodes: tuple
    edges: tuple

    def __post_init__(self):
        nodes, edges = tuple(self.nodes), tuple(self.edges)
        if len(nodes) < 2 or len(edges) != len(nodes) - 1:
            raise StructureError("a chain needs N >= 2 nodes and N - 1 edges")
        if len({nd.name for nd in nodes}) != len(nodes):
            raise StructureError("node names must be unique")
        for e, edge in enumerate(edges):
            if edge.M_left.shape[1] != nodes[e].n or edge.M_right.shape[1] != nodes[e + 1].n:
                raise StructureError(f"edge {e} does not match the sizes of nodes {e} and {e + 1}")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)

    def __len__(self) -> int:
        return len(self.nodes)

    def index(self, name: str) -> int:
        for i, nd in enumerate(self.nodes):
            if nd.name == name:
                return i
        raise KeyError(name)

    def incident(self, i: int) -> list:
        """``(edge, neighbour, own_matrix, neighbour_matrix)`` for node ``i``."""
        out = []
        if i > 0:
            e = self.edges[i - 1]
            out.append((i - 1, i - 1, e.M_right, e.M_left))
        if i < len(self.nodes) - 1:
            e = self.edges[i]
            out.append((i, i + 1, e.M_left, e.M_right))
        return out

    def edge_link(self, sender: int, receiver: int) -> tuple[int, LinkingConstraint]:
        """The shared edge oriented as ``M_sender v_s + M_receiver v_r = c``."""
        if abs(sender - receiver) != 1:
            raise StructureError(f"nodes {sender} and {receiver} are not neighbours")
        e = min(sender, receiver)
        edge = self.edges[e]
        if sender < receiver:
            return e, LinkingConstraint(edge.M_left, edge.M_right, edge.c)
        return e, LinkingConstraint(edge.M_right, edge.M_left, edge.c)

    def edge_bounds(self, sender: int, receiver: int) -> PublicBounds:
        s, r = self.nodes[sender], self.nodes[receiver]
        return PublicBounds(s.public_lower, s.public_upper, r.public_lower, r.public_upper)

    def objective(self, values) -> float:
        return float(sum(v @ nd.P @ v + nd.c @ v for nd, v in zip(self.nodes, values)))

    @classmethod
    def from_problem(cls, problem: QuadraticProblem, bounds: Optional[PublicBounds] = None,
                     names: tuple = ("x", "z")) -> "ChainProblem":
        """Two-node chain equivalent to an aggregator problem."""
        b = bounds or PublicBounds.unbounded(problem.n, problem.m)
        x = NodeSpec(names[0], problem.P, problem.c_cost, b.x_lower, b.x_upper)
        z = NodeSpec(names[1], problem.Q, problem.d_cost, b.z_lower, b.z_upper)
        return cls((x, z), (EdgeSpec(problem.link.A, problem.link.B, problem.link.c_link),))

    def with_node(self, i: int, **changes) -> "ChainProblem":
        nodes = list(self.nodes)
        fields = {k: getattr(nodes[i], k) for k in NodeSpec.__dataclass_fields__}
        fields.update(changes)
        nodes[i] = NodeSpec(**fields)
        return ChainProblem(tuple(nodes), self.edges)


@dataclass
class ChainRun:
    """Everything each node computed, sent, received and stored.

    ``values[k][i]`` is node i's own (honest) minimiser in round k,
    ``sent[k][i]`` what it transmitted, ``received[k][(r, s)]`` the value
    node r used for neighbour s after any mitigation, and
    ``duals[k][(i, e)]`` node i's copy of edge e's scaled dual after
    round k. Round 0 holds the initial state.
    """

    chain: ChainProblem
    rho: float
    values: list = field(default_factory=list)
    sent: list = field(default_factory=list)
    received: list = field(default_factory=list)
    duals: list = field(default_factory=list)
    mitigated: list = field(default_factory=list)
    termination: str = "in-progress"
    reads: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.values) - 1

    @property
    def converged(self) -> bool:
        return self.termination == "converged"

    def final_values(self) -> list:
        return [np.array(v) for v in self.sent[-1]]

    def seen_by(self, receiver: int, sender: int, k: int) -> np.ndarray:
        """Value of ``sender`` that ``receiver`` held after round ``k``."""
        if receiver == sender:
            return self.sent[k][receiver]
        return self.received[k][(receiver, sender)]

    def view(self, receiver: int, sender: int) -> tuple[AdmmTrace, LinkingConstraint]:
        """The receiver's record of one neighbour, as a standard trace.

        The neighbour plays the x role and the receiver the z role; ``u``
        is the receiver's own dual copy and ``z_seen`` is the receiver's
        value the neighbour's update was computed against.
        """
        e, link = self.chain.edge_link(sender, receiver)
        sender_first = sender % 2 == 0
        z0 = self.sent[0][receiver]
        u0 = self.duals[0][(receiver, e)]
        entries = []
        for k in range(1, self.k + 1):
            x = self.received[k][(receiver, sender)]
            z = self.sent[k][receiver]
            u = self.duals[k][(receiver, e)]
            z_prev = self.sent[k - 1][receiver]
            z_seen = z_prev if sender_first else z
            r = link.A @ x + link.B @ z - link.c_link
            s = self.rho * (link.A.T @ (link.B @ (z - z_prev)))
            entries.append(TraceEntry(k, x, z, u, r, s, z_seen=z_seen))
        return AdmmTrace(tuple(entries), self.rho, z0, u0, self.termination), link


class _NodeSolver:
    """Pre-factored local update of one node, optionally with pinned coordinates."""

    def __init__(self, chain: ChainProblem, i: int, rho: float, pinned: Optional[dict] = None):
        node = chain.nodes[i]
        self.node, self.rho = node, rho
        self.incident = chain.incident(i)
        self.edge_c = {e: chain.edges[e].c for e, *_ in self.incident}
        K = 2.0 * node.P
        for _, _, M_own, _ in self.incident:
            K = K + rho * M_own.T @ M_own
        self.pinned = dict(pinned or {})
        self.free = [j for j in range(node.n) if j not in self.pinned]
        self.fixed = sorted(self.pinned)
        self.K = K
        try:
            self.fac = linalg.cho_factor(K[np.ix_(self.free, self.free)] if self.fixed else K, lower=False)
        except linalg.LinAlgError:
            raise NumericalError(f"local system of node {node.name} is not positive definite",
                                 float(np.linalg.cond(K))) from None

    def solve(self, neighbour_values: dict, duals: dict) -> np.ndarray:
        rhs = -self.node.c
        for e, nb, M_own, M_nb in self.incident:
            gamma = M_nb @ neighbour_values[nb] - self.edge_c[e] + duals[e]
            rhs = rhs - self.rho * (M_own.T @ gamma)
        if not self.fixed:
            return linalg.cho_solve(self.fac, rhs)
        v = np.zeros(self.node.n)
        v[self.fixed] = [self.pinned[j] for j in self.fixed]
        rhs_free = rhs[self.free] - self.K[np.ix_(self.free, self.fixed)] @ v[self.fixed]
        v[self.free] = linalg.cho_solve(self.fac, rhs_free)
        return v


def _pinned_coordinates(node: NodeSpec) -> dict:
    """Coordinates a private-infeasibility attacker fixes inside ``X_pub \\ X``."""
    bounds = PublicBounds(node.public_lower, node.public_upper, np.zeros(0), np.zeros(0))
    target = private_infeasibility_attack(np.full(node.n, np.nan), node.private_lower, node.private_upper,
                                          bounds, mode="inside_pub")
    return {j: float(target[j]) for j in range(node.n) if np.isfinite(target[j])}


def run_decentralized(chain: ChainProblem, cfg: AdmmConfig = AdmmConfig(), mitigate: bool = False,
                      initial: Optional[list] = None) -> ChainRun:
    """Synchronous red-black ADMM over the chain.

    Parameters
    ----------
    chain : ChainProblem
    cfg : AdmmConfig
        ``rho``, thresholds and iteration cap. ``z0``/``u0`` are ignored;
        every node starts at ones and every dual copy at zero unless
        ``initial`` gives the node starting values.
    mitigate : bool
        Receivers project every received value onto the set reachable
        under the public bounds of the shared edge.
    """
    N, rho = len(chain), cfg.rho
    solvers = []
    for i, node in enumerate(chain.nodes):
        pinned = None
        if node.attack is not None and node.attack.vector == "private_infeasibility":
            pinned = _pinned_coordinates(node)
        solvers.append(_NodeSolver(chain, i, rho, pinned))

    boxes = {}
    if mitigate:
        from .mitigator import feasible_box
        for r in range(N):
            for _, s, _, _ in chain.incident(r):
                _, link = chain.edge_link(s, r)
                boxes[(r, s)] = feasible_box(link, chain.edge_bounds(s, r))

    start = initial or [np.ones(nd.n) for nd in chain.nodes]
    run = ChainRun(chain, rho)
    v0 = [np.array(v, dtype=float) for v in start]
    run.values.append(v0)
    run.sent.append(v0)
    run.received.append({(r, s): v0[s] for r in range(N) for _, s, _, _ in chain.incident(r)})
    run.duals.append({(i, e): np.zeros(chain.edges[e].c.shape[0]) for i in range(N) for e, *_ in chain.incident(i)})
    run.mitigated.append({})

    colours = [[i for i in range(N) if i % 2 == 0], [i for i in range(N) if i % 2 == 1]]
    for k in range(1, cfg.max_iterations + 1):
        held = dict(run.received[-1])  # (receiver, sender) -> value
        duals_prev = run.duals[-1]
        honest, sent, flags = [None] * N, [None] * N, {}
        for group in colours:
            for i in group:
                nb_vals = {nb: held[(i, nb)] for _, nb, _, _ in chain.incident(i)}
                run.reads.append((k, i, tuple(sorted(nb_vals))))
                honest[i] = solvers[i].solve(nb_vals, {e: duals_prev[(i, e)] for e, *_ in chain.incident(i)})
                node = chain.nodes[i]
                if node.attack is None:
                    honest[i] = _own_box(node, honest[i])
                elif node.attack.vector == "private_infeasibility":
                    # stealthy: leave X but stay inside X_pub
                    honest[i] = np.clip(honest[i], node.public_lower, node.public_upper)
                sent[i] = _transmit(chain, i, honest[i], k)
                for _, nb, _, _ in chain.incident(i):
                    msg = sent[i]
                    if mitigate:
                        lo, hi = boxes[(nb, i)]
                        clipped = np.clip(msg, lo, hi)
                        flags[(nb, i)] = bool(np.any(clipped != msg))
                        msg = clipped
                    held[(nb, i)] = msg
        duals = {}
        for i in range(N):
            node = chain.nodes[i]
            mine = honest[i] if (node.attack is not None and node.dual_lying) else sent[i]
            for e, nb, _, _ in chain.incident(i):
                edge = chain.edges[e]
                left, right = (mine, held[(i, nb)]) if e == i else (held[(i, nb)], mine)
                duals[(i, e)] = duals_prev[(i, e)] + (edge.M_left @ left + edge.M_right @ right - edge.c)
        for arr in sent:
            if not np.all(np.isfinite(arr)):
                run.termination = "numerical-failure"
                raise NumericalError(f"non-finite iterate at round {k}")
        run.values.append(honest)
        run.sent.append(sent)
        run.received.append(held)
        run.duals.append(duals)
        run.mitigated.append(flags)
        if _all_local_converged(run, cfg):
            run.termination = "converged"
            return run
    run.termination = "iteration-cap"
    return run


def _own_box(node: NodeSpec, v: np.ndarray) -> np.ndarray:
    """Clamp an honest update into ``X`` intersected with ``X_pub``.

    Inactive whenever the unconstrained minimiser already lies inside, which
    is the case for honest runs under the bounds of :func:`bounds_from_run`.
    """
    lo = np.maximum(node.private_lower, node.public_lower)
    hi = np.minimum(node.private_upper, node.public_upper)
    return np.clip(v, lo, hi)


def _transmit(chain: ChainProblem, i: int, v: np.ndarray, k: int) -> np.ndarray:
    """Value node i sends to all its neighbours in round k."""
    spec = chain.nodes[i].attack
    if spec is None or k < spec.start_iteration:
        return v
    if spec.vector == "noise_injection":
        return noise_attack(v, spec, k)
    if spec.vector == "linking_infeasibility":
        x = v
        for _, nb, _, _ in chain.incident(i):
            _, link = chain.edge_link(i, nb)
            x = displace_outside(x, link, chain.edge_bounds(i, nb), spec.margin, spec.side)
        return x
    # private_infeasibility is realised by the pinned solver; objective
    # distortion is not modelled on chains
    return v


def _all_local_converged(run: ChainRun, cfg: AdmmConfig) -> bool:
    chain, k = run.chain, run.k
    for i in range(len(chain)):
        for e, nb, _, _ in chain.incident(i):
            edge = chain.edges[e]
            left = run.seen_by(i, e, k)
            right = run.seen_by(i, e + 1, k)
            r = edge.M_left @ left + edge.M_right @ right - edge.c
            # the odd endpoint of an edge is the second block
            second = e if e % 2 == 1 else e + 1
            M_first = edge.M_left if second == e + 1 else edge.M_right
            M_second = edge.M_right if second == e + 1 else edge.M_left
            d = run.seen_by(i, second, k) - run.seen_by(i, second, k - 1)
            s = run.rho * (M_first.T @ (M_second @ d))
            if np.linalg.norm(r) > cfg.eps_pri or np.linalg.norm(s) > cfg.eps_dual:
                return False
    return True


def bounds_from_run(run: ChainRun, pad: float = 1.0) -> ChainProblem:
    """Copy of the chain with public boxes enclosing an honest run.

    Each node's box spans its trajectory widened by ``pad``; the two ends of
    every link then get the union of their intervals, so a linked pair
    shares one public interval.
    """
    chain = run.chain
    traj = [np.array([run.sent[k][i] for k in range(run.k + 1)]) for i in range(len(chain))]
    lo = [t.min(axis=0) - pad for t in traj]
    hi = [t.max(axis=0) + pad for t in traj]
    for e, edge in enumerate(chain.edges):
        for row in range(edge.c.shape[0]):
            a = int(np.flatnonzero(edge.M_left[row])[0])
            b = int(np.flatnonzero(edge.M_right[row])[0])
            l, h = min(lo[e][a], lo[e + 1][b]), max(hi[e][a], hi[e + 1][b])
            lo[e][a] = lo[e + 1][b] = l
            hi[e][a] = hi[e + 1][b] = h
    out = chain
    for i in range(len(chain)):
        out = out.with_node(i, public_lower=lo[i], public_upper=hi[i])
    return out


# ---------------------------------------------------------------- security


@dataclass(frozen=True)
class LinkCheckReport:
    """Public-bound check of one neighbour's messages at a receiver."""

    receiver: str
    sender: str
    detected: bool
    first_violation: Optional[int]
    localized_to: Optional[str]


def linking_check(run: ChainRun, receiver: int, sender: int) -> LinkCheckReport:
    """Check every message from ``sender`` against the edge's reachable set.

    With public bounds shared chain-wide an honest node never sends a value
    that no feasible neighbour value could match, so a violation is
    attributed to the sender itself.
    """
    from .mitigator import feasible_box
    _, link = run.chain.edge_link(sender, receiver)
    lo, hi = feasible_box(link, run.chain.edge_bounds(sender, receiver))
    first = None
    for k in range(1, run.k + 1):
        msg = run.sent[k][sender]
        if np.any(msg < lo) or np.any(msg > hi):
            first = k
            break
    names = run.chain.nodes
    return LinkCheckReport(names[receiver].name, names[sender].name, first is not None, first,
                           names[sender].name if first is not None else None)


def node_audit(run: ChainRun, receiver: int, sender: int, cfg: DetectorConfig = DetectorConfig()) -> DetectionReport:
    """Convexity audit of ``sender`` using only what ``receiver`` holds.

    The audit is exact when the sender's cost separates across its edges
    (always true for end nodes). If the sender's cost couples its edges,
    traffic on the edge the receiver cannot see leaks into the audited
    relation: honest runs may be flagged, and so may an honest sender
    downstream of a noisy node. The report's caveat records that a flag
    cannot be attributed to the sender alone.
    """
    trace, link = run.view(receiver, sender)
    report = detect(trace, link, cfg)
    report.caveat = LOCALIZATION_CAVEAT if report.caveat is None else f"{report.caveat}; {LOCALIZATION_CAVEAT}"
    return report


# ------------------------------------------------------------- generation


def random_chain(rng: np.random.Generator, sizes=(3, 3, 3), links=(1, 1), scale: float = 1.0,
                 curvature_floor: float = 0.1, names: Optional[tuple] = None,
                 coupling: float = 0.0) -> ChainProblem:
    """Chain with random PSD costs and disjoint selector links.

    Edge ``e`` ties the last ``links[e]`` coordinates of node ``e`` to the
    first ``links[e]`` coordinates of node ``e + 1`` (``v_e - v_{e+1} = 0``
    on those coordinates). Draws are repeated until every node's cost is
    positive definite with least eigenvalue above ``curvature_floor``.

    A node with two edges has its coordinates split into a left block
    (holding the left edge's coordinates) and a right block. Its cost
    factor is ``[[L_a, coupling * C], [0, L_b]]``; with ``coupling = 0``
    the cost separates across the two edges, which is what makes a
    single-edge audit of that node exact. Any coupling lets the other
    edge's traffic leak into the audited relation.
    """
    sizes, links = tuple(sizes), tuple(links)
    if len(links) != len(sizes) - 1:
        raise StructureError("need one link size per edge")
    for i, n in enumerate(sizes):
        used = (links[i - 1] if i > 0 else 0) + (links[i] if i < len(links) else 0)
        if used > n:
            raise StructureError(f"node {i} has {n} coordinates but {used} linked ones")
    names = names or tuple(f"n{i}" for i in range(len(sizes)))
    nodes = []
    for i, (name, n) in enumerate(zip(names, sizes)):
        middle = 0 < i < len(sizes) - 1
        h = max(links[i - 1], min(n - links[i], n // 2)) if middle else n
        while True:
            L = rng.uniform(-scale, scale, size=(n, n))
            if middle:
                L[h:, :h] = 0.0
                L[:h, h:] *= coupling
            P = L.T @ L
            P = 0.5 * (P + P.T)
            if np.linalg.eigvalsh(P)[0] >= curvature_floor * scale**2:
                break
        nodes.append(NodeSpec(name, P, rng.uniform(-scale**2, scale**2, size=n)))
    edges = []
    for e, p in enumerate(links):
        nl, nr = sizes[e], sizes[e + 1]
        Ml = np.zeros((p, nl))
        Ml[:, nl - p:] = np.eye(p)
        Mr = np.zeros((p, nr))
        Mr[:, :p] = -np.eye(p)
        edges.append(EdgeSpec(Ml, Mr, np.zeros(p)))
    return ChainProblem(tuple(nodes), tuple(edges))
