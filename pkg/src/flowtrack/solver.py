"""Weighted-flow LP over a FlowNetwork and trajectory extraction from its optimum.

Variables are the network edges in network order. Every constraint row has integer
coefficients in {-1, 0, 1} and an integral right-hand side, so a simplex vertex of the
relaxation is binary; anything else is reported as NonIntegralSolutionError.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from flowtrack.errors import BrokenPathError, NonIntegralSolutionError, SolverFailureError
from flowtrack.models import ConstraintSet, PointId, Trajectory, find_shared_nodes
from flowtrack.network import EdgeKind, FlowNetwork

logger = logging.getLogger(__name__)

INTEGRALITY_TOLERANCE = 1e-6
RESIDUAL_TOLERANCE = 1e-9


@dataclass(frozen=True, slots=True)
class RowLabel:
    kind: str  # out, in, bal or loop
    node: PointId | None = None

    def describe(self) -> str:
        if self.node is None:
            return f"{self.kind} (source total)"
        return f"{self.kind} at (t={self.node.frame}, i={self.node.index})"


@dataclass(frozen=True, slots=True)
class LpInstance:
    weights: np.ndarray
    a_ub: sparse.csr_matrix
    b_ub: np.ndarray
    a_eq: sparse.csr_matrix
    b_eq: np.ndarray
    bounds: np.ndarray
    ub_labels: tuple[RowLabel, ...]
    eq_labels: tuple[RowLabel, ...]

    @property
    def variable_count(self) -> int:
        return len(self.weights)


class _RowBuilder:
    def __init__(self) -> None:
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.vals: list[float] = []
        self.rhs: list[float] = []
        self.labels: list[RowLabel] = []

    def add(self, terms: list[tuple[int, float]], rhs: float, label: RowLabel) -> None:
        if not terms:
            return
        row = len(self.rhs)
        for col, value in terms:
            self.rows.append(row)
            self.cols.append(col)
            self.vals.append(value)
        self.rhs.append(rhs)
        self.labels.append(label)

    def matrix(self, columns: int) -> sparse.csr_matrix:
        return sparse.csr_matrix(
            (self.vals, (self.rows, self.cols)), shape=(len(self.rhs), columns), dtype=np.float64
        )


def _terms(edges: tuple[int, ...], sign: float) -> list[tuple[int, float]]:
    return [(e, sign) for e in edges]


def assemble_lp(network: FlowNetwork, constraints: ConstraintSet) -> LpInstance:
    constraints.validate()
    T = network.sequence.T  # noqa: N806
    n = len(network.edges)
    weights = np.zeros(n, dtype=np.float64)
    bounds = np.tile([0.0, 1.0], (n, 1))
    for index, edge in enumerate(network.edges):
        if edge.kind is EdgeKind.SOURCE:
            # source flow exists only under conservation
            if not constraints.bal:
                bounds[index, 1] = 0.0
            continue
        weights[index] = edge.weight
        if edge.kind is EdgeKind.LOOP and not constraints.loop:
            bounds[index, 1] = 0.0

    def loop_part(edges: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(e for e in edges if network.edges[e].kind is EdgeKind.LOOP)

    def temporal_part(edges: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(e for e in edges if network.edges[e].kind is EdgeKind.TEMPORAL)

    upper = _RowBuilder()
    equal = _RowBuilder()
    nodes = list(network.nodes())
    for node in nodes:
        upper.add(_terms(network.outgoing(node), 1.0), 1.0, RowLabel("out", node))
    if constraints.inc:
        for node in nodes:
            upper.add(_terms(network.incoming(node), 1.0), 1.0, RowLabel("in", node))

    if constraints.bal:
        for node in nodes:
            out_edges = network.outgoing(node)
            if node.frame == 1:
                # source flow into a frame-1 node equals what it sends on
                source = network.source_edge(node)
                tie = [] if source is None else [(source, -1.0)]
                equal.add(
                    tie + _terms(temporal_part(out_edges), 1.0),
                    0.0,
                    RowLabel("loop" if constraints.loop else "bal", node),
                )
            elif node.frame < T:
                equal.add(
                    _terms(network.incoming(node), -1.0) + _terms(out_edges, 1.0),
                    0.0,
                    RowLabel("bal", node),
                )
            elif not constraints.loop:
                # frame T drains to the sink with unit capacity
                upper.add(_terms(network.incoming(node), 1.0), 1.0, RowLabel("bal", node))

    if constraints.loop:
        for node in nodes:
            if node.frame == 1:
                equal.add(
                    _terms(network.outgoing(node), 1.0)
                    + _terms(loop_part(network.incoming(node)), -1.0),
                    0.0,
                    RowLabel("loop", node),
                )
            if node.frame == T:
                equal.add(
                    _terms(loop_part(network.outgoing(node)), 1.0)
                    + _terms(network.incoming(node), -1.0),
                    0.0,
                    RowLabel("loop", node),
                )
        equal.add(
            _terms(tuple(network.indices_of(EdgeKind.SOURCE).tolist()), 1.0)
            + _terms(tuple(network.indices_of(EdgeKind.LOOP).tolist()), -1.0),
            0.0,
            RowLabel("loop"),
        )

    return LpInstance(
        weights=weights,
        a_ub=upper.matrix(n),
        b_ub=np.asarray(upper.rhs, dtype=np.float64),
        a_eq=equal.matrix(n),
        b_eq=np.asarray(equal.rhs, dtype=np.float64),
        bounds=bounds,
        ub_labels=tuple(upper.labels),
        eq_labels=tuple(equal.labels),
    )


@dataclass(frozen=True, slots=True)
class SolverStats:
    iterations: int
    status: str
    max_deviation: float
    residuals: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True, slots=True)
class FlowSolution:
    flow: np.ndarray  # 0/1 per network edge
    objective: float
    constraints: ConstraintSet
    stats: SolverStats

    def __post_init__(self) -> None:
        flow = np.asarray(self.flow, dtype=np.int64).copy()
        flow.setflags(write=False)
        object.__setattr__(self, "flow", flow)

    def active_edges(self) -> np.ndarray:
        return np.flatnonzero(self.flow == 1)

    def to_dict(self) -> dict[str, object]:
        return {
            "objective": self.objective,
            "constraints": self.constraints.names(),
            "active_edges": int(self.flow.sum()),
            "iterations": self.stats.iterations,
            "status": self.stats.status,
            "max_deviation": self.stats.max_deviation,
            "residuals": dict(self.stats.residuals),
        }


def _residuals(lp: LpInstance, flow: np.ndarray) -> dict[str, float]:
    ub = lp.a_ub @ flow - lp.b_ub if lp.b_ub.size else np.zeros(0)
    eq = lp.a_eq @ flow - lp.b_eq if lp.b_eq.size else np.zeros(0)
    return {
        "inequality": float(np.max(ub, initial=0.0)),
        "equality": float(np.max(np.abs(eq), initial=0.0)),
    }


def solve_flow(network: FlowNetwork, constraints: ConstraintSet) -> FlowSolution:
    lp = assemble_lp(network, constraints)
    if lp.variable_count == 0:
        return FlowSolution(
            flow=np.zeros(0, dtype=np.int64),
            objective=0.0,
            constraints=constraints,
            stats=SolverStats(iterations=0, status="empty", max_deviation=0.0),
        )
    result = linprog(
        c=-lp.weights,
        A_ub=lp.a_ub if lp.b_ub.size else None,
        b_ub=lp.b_ub if lp.b_ub.size else None,
        A_eq=lp.a_eq if lp.b_eq.size else None,
        b_eq=lp.b_eq if lp.b_eq.size else None,
        bounds=lp.bounds,
        method="highs-ds",
    )
    if not result.success or result.x is None:
        raise SolverFailureError(
            f"LP solve failed for constraints {constraints.label()}: {result.message}",
            status=int(result.status),
        )
    relaxed = np.asarray(result.x, dtype=np.float64)
    rounded = np.rint(relaxed)
    deviation = float(np.max(np.abs(relaxed - rounded), initial=0.0))
    if deviation > INTEGRALITY_TOLERANCE:
        raise NonIntegralSolutionError(deviation)
    residuals = _residuals(lp, rounded)
    if max(residuals.values()) > RESIDUAL_TOLERANCE:
        raise SolverFailureError(
            f"rounded flow violates constraints {constraints.label()}: {residuals}",
            status=int(result.status),
            residuals=residuals,
        )
    objective = float(lp.weights @ rounded)
    logger.debug(
        "solved %d variables (%d ub rows, %d eq rows) constraints=%s objective=%.6g",
        lp.variable_count,
        lp.b_ub.size,
        lp.b_eq.size,
        constraints.label(),
        objective,
    )
    return FlowSolution(
        flow=rounded.astype(np.int64),
        objective=objective,
        constraints=constraints,
        stats=SolverStats(
            iterations=int(getattr(result, "nit", 0) or 0),
            status=str(result.message),
            max_deviation=deviation,
            residuals=residuals,
        ),
    )


@dataclass(frozen=True, slots=True)
class SolutionViolation:
    kind: str
    message: str
    node: PointId | None = None


def verify_solution(
    solution: FlowSolution | np.ndarray,
    network: FlowNetwork,
    constraints: ConstraintSet | None = None,
) -> list[SolutionViolation]:
    if isinstance(solution, FlowSolution):
        flow = np.asarray(solution.flow, dtype=np.float64)
        constraints = constraints or solution.constraints
    else:
        flow = np.asarray(solution, dtype=np.float64)
    if constraints is None:
        raise ValueError("constraints are required when verifying a raw flow vector")
    violations: list[SolutionViolation] = []
    if flow.shape != (len(network.edges),):
        return [
            SolutionViolation(
                "shape", f"flow has shape {flow.shape}, network has {len(network.edges)} edges"
            )
        ]
    for index in np.flatnonzero(np.abs(flow - np.rint(flow)) > INTEGRALITY_TOLERANCE):
        violations.append(
            SolutionViolation("binary", f"edge {index} carries fractional flow {flow[index]!r}")
        )
    for index in np.flatnonzero((flow < -RESIDUAL_TOLERANCE) | (flow > 1 + RESIDUAL_TOLERANCE)):
        violations.append(
            SolutionViolation("binary", f"edge {index} carries flow {flow[index]!r} outside [0, 1]")
        )
    loop_edges = network.indices_of(EdgeKind.LOOP)
    if not constraints.loop and loop_edges.size and np.any(flow[loop_edges] > RESIDUAL_TOLERANCE):
        violations.append(SolutionViolation("loop", "loop edge carries flow with C_loop disabled"))

    lp = assemble_lp(network, constraints)
    if lp.b_ub.size:
        excess = lp.a_ub @ flow - lp.b_ub
        for row in np.flatnonzero(excess > RESIDUAL_TOLERANCE):
            label = lp.ub_labels[row]
            violations.append(
                SolutionViolation(
                    label.kind,
                    f"{label.describe()}: sum {excess[row] + lp.b_ub[row]!r} exceeds 1",
                    label.node,
                )
            )
    if lp.b_eq.size:
        residual = lp.a_eq @ flow - lp.b_eq
        for row in np.flatnonzero(np.abs(residual) > RESIDUAL_TOLERANCE):
            label = lp.eq_labels[row]
            violations.append(
                SolutionViolation(
                    label.kind,
                    f"{label.describe()}: balance residual {residual[row]!r}",
                    label.node,
                )
            )
    return violations


def _active_out(network: FlowNetwork, flow: np.ndarray, node: PointId, kind: EdgeKind) -> list[int]:
    return [
        e for e in network.outgoing(node) if flow[e] == 1 and network.edges[e].kind is kind
    ]


def extract_trajectories(solution: FlowSolution, network: FlowNetwork) -> list[Trajectory]:
    """Walk unit-flow edges from frame 1 to frame T.

    With C_bal every source-fed node yields one trajectory and trajectories must be node-disjoint.
    Without it each frame-1 node with outgoing flow is walked along its single active edge;
    walks that stop before frame T are dropped and overlapping walks are kept.
    """
    flow = np.asarray(solution.flow)
    if flow.size == 0:
        return []
    T = network.sequence.T  # noqa: N806
    balanced = solution.constraints.bal
    starts: list[PointId] = []
    for i in range(1, network.sequence.sizes[0] + 1):
        node = PointId(1, i)
        if balanced:
            source = network.source_edge(node)
            if source is not None and flow[source] == 1:
                starts.append(node)
        elif _active_out(network, flow, node, EdgeKind.TEMPORAL):
            starts.append(node)

    trajectories: list[Trajectory] = []
    dropped = 0
    for start in starts:
        path = [start]
        node = start
        while node.frame < T:
            active = _active_out(network, flow, node, EdgeKind.TEMPORAL)
            if len(active) != 1:
                if balanced:
                    raise BrokenPathError(
                        f"node (t={node.frame}, i={node.index}) has {len(active)} active "
                        f"outgoing edges on the walk from (t=1, i={start.index})"
                    )
                break
            node = network.edges[active[0]].head
            path.append(node)
        if node.frame < T:
            dropped += 1
            continue
        closing = _active_out(network, flow, node, EdgeKind.LOOP)
        if len(closing) > 1:
            raise BrokenPathError(
                f"node (t={node.frame}, i={node.index}) has {len(closing)} active loop edges"
            )
        closure = network.edges[closing[0]].head if closing else None
        if balanced and solution.constraints.loop and closure is None:
            raise BrokenPathError(
                f"trajectory from (t=1, i={start.index}) does not close under loop constraints"
            )
        trajectories.append(Trajectory(points=tuple(path), loop_closure=closure))

    if dropped:
        logger.info("dropped %d walk(s) that stop before frame %d", dropped, T)
    shared = find_shared_nodes(trajectories)
    if shared:
        if balanced:
            first = next(iter(shared))
            raise BrokenPathError(
                f"node (t={first.frame}, i={first.index}) is shared by {shared[first]} trajectories"
            )
        logger.info("%d node(s) shared between trajectories", len(shared))
    return trajectories
