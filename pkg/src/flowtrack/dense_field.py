"""Compactly supported RBF displacement fields.

U(x) = sum_k c_k phi(|x - p_k| / rho) with the Wendland C2 kernel phi(q) = (1-q)^4 (4q+1).
Fitting minimises

    sum_i |U(x_i) - d_i|^2 + l_sparse sum_k |c_k|_1
        + l_div sum_g (div U(x_g))^2 + l_grad sum_g |grad U(x_g)|_F^2

over the coefficients, with derivatives taken analytically at collocation points x_g.
Displacement fields also carry an affine tail A x + b, left out of the L1 term, so
uniform stretch and shear do not have to be assembled from kernels.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, lsqr, svds
from scipy.sparse.linalg import norm as sparse_norm
from scipy.spatial import cKDTree

from flowtrack.errors import DegenerateSystemError
from flowtrack.models import FrameSequence, Trajectory

logger = logging.getLogger(__name__)

KERNEL_TAG = "wendland-c2"
OBJECTIVE_TOLERANCE = 1e-8
MAX_PROXIMAL_ITERATIONS = 5000


@dataclass(frozen=True, slots=True)
class RegularizationWeights:
    lambda_sparse: float = 1e-3
    lambda_div: float = 1e-2
    lambda_grad: float = 1e-3
    support_scale: float = 2.0
    support_neighbors: int = 8
    grid_points: int = 10_000

    def __post_init__(self) -> None:
        for name in ("lambda_sparse", "lambda_div", "lambda_grad"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if not self.support_scale > 0:
            raise ValueError(f"support_scale must be positive, got {self.support_scale}")
        if self.support_neighbors < 1:
            raise ValueError(f"support_neighbors must be >= 1, got {self.support_neighbors}")
        if self.grid_points < 8:
            raise ValueError(f"grid_points must be >= 8, got {self.grid_points}")

    def to_dict(self) -> dict[str, object]:
        return {
            "lambda_sparse": self.lambda_sparse,
            "lambda_div": self.lambda_div,
            "lambda_grad": self.lambda_grad,
            "support_scale": self.support_scale,
            "support_neighbors": self.support_neighbors,
            "grid_points": self.grid_points,
        }


NO_REGULARIZATION = RegularizationWeights(lambda_sparse=0.0, lambda_div=0.0, lambda_grad=0.0)


def wendland(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    inside = np.clip(1.0 - q, 0.0, None)
    return inside**4 * (4.0 * q + 1.0)


def wendland_derivative(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return -20.0 * q * np.clip(1.0 - q, 0.0, None) ** 3


@dataclass(frozen=True, slots=True)
class RbfModel:
    centers: np.ndarray
    coefficients: np.ndarray
    support_radius: float
    kernel: str = KERNEL_TAG
    affine: np.ndarray | None = None  # [A | b], adds A x + b to the kernel sum

    def __post_init__(self) -> None:
        centers = np.array(self.centers, dtype=np.float64).reshape(-1, 3)
        coefficients = np.array(self.coefficients, dtype=np.float64).reshape(-1, 3)
        if len(centers) != len(coefficients):
            raise ValueError(
                f"{len(coefficients)} coefficient rows for {len(centers)} centers"
            )
        if not self.support_radius > 0:
            raise ValueError(f"support_radius must be positive, got {self.support_radius}")
        if self.kernel != KERNEL_TAG:
            raise ValueError(f"unsupported kernel '{self.kernel}' (expected {KERNEL_TAG})")
        centers.setflags(write=False)
        coefficients.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "coefficients", coefficients)
        object.__setattr__(self, "support_radius", float(self.support_radius))
        if self.affine is not None:
            affine = np.array(self.affine, dtype=np.float64)
            if affine.shape != (3, 4):
                raise ValueError(f"affine part must have shape (3, 4), got {affine.shape}")
            affine.setflags(write=False)
            object.__setattr__(self, "affine", affine)

    def to_dict(self) -> dict[str, object]:
        payload: dict[str, object] = {
            "schema_version": "v1",
            "kernel": self.kernel,
            "support_radius": self.support_radius,
            "centers": self.centers.tolist(),
            "coefficients": self.coefficients.tolist(),
        }
        if self.affine is not None:
            payload["affine"] = self.affine.tolist()
        return payload

    @classmethod
    def from_dict(cls, payload: dict[str, object]) -> RbfModel:
        affine = payload.get("affine")
        return cls(
            centers=np.asarray(payload["centers"], dtype=np.float64),
            coefficients=np.asarray(payload["coefficients"], dtype=np.float64),
            support_radius=float(payload["support_radius"]),  # type: ignore[arg-type]
            kernel=str(payload.get("kernel", KERNEL_TAG)),
            affine=None if affine is None else np.asarray(affine, dtype=np.float64),
        )


@dataclass(frozen=True, slots=True)
class _Pairs:
    rows: np.ndarray
    cols: np.ndarray
    offsets: np.ndarray  # x - p for each (query, center) pair within the support
    q: np.ndarray


def _support_pairs(centers: np.ndarray, queries: np.ndarray, radius: float) -> _Pairs:
    if len(centers) == 0 or len(queries) == 0:
        empty = np.empty(0, dtype=np.int64)
        return _Pairs(empty, empty, np.empty((0, 3)), np.empty(0))
    tree = cKDTree(centers)
    hits = tree.query_ball_point(queries, radius)
    counts = np.fromiter((len(h) for h in hits), dtype=np.int64, count=len(hits))
    rows = np.repeat(np.arange(len(queries)), counts)
    cols = (
        np.concatenate([np.sort(np.asarray(h, dtype=np.int64)) for h in hits])
        if counts.sum()
        else np.empty(0, dtype=np.int64)
    )
    offsets = queries[rows] - centers[cols]
    q = np.linalg.norm(offsets, axis=1) / radius
    keep = q < 1.0
    return _Pairs(rows[keep], cols[keep], offsets[keep], q[keep])


def basis_matrix(centers: np.ndarray, queries: np.ndarray, radius: float) -> sparse.csr_matrix:
    pairs = _support_pairs(centers, queries, radius)
    return sparse.csr_matrix(
        (wendland(pairs.q), (pairs.rows, pairs.cols)), shape=(len(queries), len(centers))
    )


def derivative_matrices(
    centers: np.ndarray, queries: np.ndarray, radius: float
) -> list[sparse.csr_matrix]:
    """G_b with (G_b c)(x) = d/dx_b sum_k c_k phi(|x - p_k| / radius), b = 0, 1, 2."""
    pairs = _support_pairs(centers, queries, radius)
    scale = -20.0 * np.clip(1.0 - pairs.q, 0.0, None) ** 3 / radius**2
    return [
        sparse.csr_matrix(
            (scale * pairs.offsets[:, b], (pairs.rows, pairs.cols)),
            shape=(len(queries), len(centers)),
        )
        for b in range(3)
    ]


def evaluate_field(model: RbfModel, query: np.ndarray) -> np.ndarray:
    points = np.asarray(query, dtype=np.float64)
    single = points.ndim == 1
    flat = points.reshape(-1, 3)
    values = basis_matrix(model.centers, flat, model.support_radius)
    result = np.asarray(values @ model.coefficients)
    if model.affine is not None:
        result = result + flat @ model.affine[:, :3].T + model.affine[:, 3]
    return result[0] if single else result


def evaluate_jacobian(model: RbfModel, query: np.ndarray) -> np.ndarray:
    """J[d, b] = dU_d / dx_b, shape (3, 3) or (N, 3, 3)."""
    points = np.asarray(query, dtype=np.float64)
    single = points.ndim == 1
    derivatives = derivative_matrices(model.centers, points.reshape(-1, 3), model.support_radius)
    jacobian = np.stack([np.asarray(g @ model.coefficients) for g in derivatives], axis=2)
    if model.affine is not None:
        jacobian = jacobian + model.affine[None, :, :3]
    return jacobian[0] if single else jacobian


def divergence(model: RbfModel, query: np.ndarray) -> np.ndarray:
    return np.trace(evaluate_jacobian(model, query), axis1=-2, axis2=-1)


def default_support_radius(
    centers: np.ndarray, scale: float = 2.0, neighbors: int = 1
) -> float:
    """scale x the median distance from a center to its k-th nearest other center.

    k above one lets kernels span anisotropic samplings (dense along the axis, sparse
    around it) instead of following the finest spacing only.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if neighbors < 1:
        raise ValueError(f"neighbors must be >= 1, got {neighbors}")
    if len(centers) < 2:
        raise DegenerateSystemError("a default support radius needs at least two centers")
    k = min(neighbors, len(centers) - 1)
    distances, _ = cKDTree(centers).query(centers, k=k + 1)
    spacing = float(np.median(distances[:, -1]))
    if spacing <= 0:
        raise DegenerateSystemError("median center spacing is zero (duplicate centers)")
    return scale * spacing


def collocation_grid(points: np.ndarray, grid_points: int = 10_000) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    per_axis = max(2, int(math.floor(grid_points ** (1.0 / 3.0) + 1e-9)))
    low = points.min(axis=0)
    high = points.max(axis=0)
    axes = [
        np.linspace(lo, hi, per_axis) if hi > lo else np.array([lo])
        for lo, hi in zip(low, high, strict=True)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True, slots=True)
class _AffineFrame:
    """Centred, scaled coordinates for the affine tail: columns [(x - mean) / scale, 1]."""

    mean: np.ndarray
    scale: float

    @classmethod
    def around(cls, points: np.ndarray) -> _AffineFrame:
        mean = points.mean(axis=0)
        scale = float(np.sqrt(np.mean(np.sum((points - mean) ** 2, axis=1))))
        return cls(mean, scale if scale > 0 else 1.0)

    def columns(self, points: np.ndarray) -> np.ndarray:
        return np.hstack([(points - self.mean) / self.scale, np.ones((len(points), 1))])

    def slopes(self, rows: int) -> list[sparse.csr_matrix]:
        return [
            sparse.csr_matrix(
                (np.full(rows, 1.0 / self.scale), (np.arange(rows), np.full(rows, b))),
                shape=(rows, 4),
            )
            for b in range(3)
        ]

    def to_affine(self, tail: np.ndarray) -> np.ndarray:
        linear = tail[:, :3] / self.scale
        return np.hstack([linear, (tail[:, 3] - linear @ self.mean)[:, None]])

    def from_affine(self, affine: np.ndarray) -> np.ndarray:
        linear = affine[:, :3]
        return np.hstack([linear * self.scale, (affine[:, 3] + linear @ self.mean)[:, None]])


@dataclass(frozen=True, slots=True)
class _System:
    matrix: sparse.csr_matrix
    rhs: np.ndarray
    lambda_sparse: float
    penalized: np.ndarray

    def l1(self, x: np.ndarray) -> float:
        return float(np.abs(x[self.penalized]).sum())


def _assemble(
    positions: np.ndarray,
    displacements: np.ndarray,
    centers: np.ndarray,
    radius: float,
    reg: RegularizationWeights,
    collocation: np.ndarray | None,
    frame: _AffineFrame | None = None,
    side_conditions: bool = True,
) -> _System:
    phi = basis_matrix(centers, positions, radius)
    if phi.nnz == 0 and frame is None:
        raise DegenerateSystemError(
            f"no sample lies within support radius {radius:.4g} of any center"
        )
    n = len(centers)
    width = n if frame is None else n + 4
    if frame is not None:
        phi = sparse.hstack([phi, frame.columns(positions)], format="csr")
    blocks = [sparse.block_diag([phi, phi, phi], format="csr")]
    rhs = [displacements.T.ravel()]
    if frame is not None and side_conditions:
        # kernel coefficients orthogonal to affine functions on the centers
        side = sparse.hstack(
            [sparse.csr_matrix(frame.columns(centers).T), np.zeros((4, 4))], format="csr"
        )
        blocks.append(sparse.block_diag([side, side, side], format="csr"))
        rhs.append(np.zeros(12))
    if collocation is not None and (reg.lambda_div > 0 or reg.lambda_grad > 0):
        g = derivative_matrices(centers, collocation, radius)
        if frame is not None:
            g = [
                sparse.hstack([gb, sb], format="csr")
                for gb, sb in zip(g, frame.slopes(len(collocation)), strict=True)
            ]
        if reg.lambda_div > 0:
            blocks.append(math.sqrt(reg.lambda_div) * sparse.hstack(g, format="csr"))
            rhs.append(np.zeros(len(collocation)))
        if reg.lambda_grad > 0:
            stacked = sparse.vstack(g, format="csr")
            blocks.append(
                math.sqrt(reg.lambda_grad)
                * sparse.block_diag([stacked, stacked, stacked], format="csr")
            )
            rhs.append(np.zeros(3 * stacked.shape[0]))
    matrix = sparse.vstack(blocks, format="csr")
    vector = np.concatenate(rhs)
    nonzero_rows = np.flatnonzero(np.diff(matrix.indptr) > 0)
    penalized = np.tile(np.arange(width) < n, 3)
    return _System(matrix[nonzero_rows], vector[nonzero_rows], reg.lambda_sparse, penalized)


def _objective(system: _System, x: np.ndarray) -> float:
    residual = system.matrix @ x - system.rhs
    return float(residual @ residual + system.lambda_sparse * system.l1(x))


def _spectral_norm(matrix: sparse.csr_matrix) -> float:
    if min(matrix.shape) < 3:
        return float(np.linalg.norm(matrix.toarray(), 2))
    start = np.full(min(matrix.shape), 1.0 / math.sqrt(min(matrix.shape)))
    try:
        return float(svds(matrix, k=1, v0=start, return_singular_vectors=False)[0])
    except (ArpackError, ArpackNoConvergence) as exc:
        logger.debug("svds failed (%s); using the norm-product bound", exc)
        return math.sqrt(float(sparse_norm(matrix, 1) * sparse_norm(matrix, np.inf)))


def _least_squares(system: _System) -> np.ndarray:
    result = lsqr(
        system.matrix,
        system.rhs,
        atol=1e-14,
        btol=1e-14,
        iter_lim=20 * system.matrix.shape[1] + 100,
    )
    return np.asarray(result[0], dtype=np.float64)


def _fista(system: _System, start: np.ndarray) -> tuple[np.ndarray, int]:
    lipschitz = 2.0 * _spectral_norm(system.matrix) ** 2 * 1.01
    if lipschitz == 0:
        return np.zeros_like(start), 0
    threshold = system.lambda_sparse / lipschitz
    x = start.copy()
    y = start.copy()
    momentum = 1.0
    best = _objective(system, x)
    restarted = False
    for iteration in range(1, MAX_PROXIMAL_ITERATIONS + 1):
        gradient = 2.0 * (system.matrix.T @ (system.matrix @ y - system.rhs))
        step = y - gradient / lipschitz
        z = np.where(
            system.penalized, np.sign(step) * np.maximum(np.abs(step) - threshold, 0.0), step
        )
        candidate = _objective(system, z)
        if candidate <= best:
            decrease = best - candidate
            previous, x, best = x, z, candidate
            next_momentum = (1.0 + math.sqrt(1.0 + 4.0 * momentum**2)) / 2.0
            y = x + ((momentum - 1.0) / next_momentum) * (x - previous)
            momentum = next_momentum
            restarted = False
            if decrease <= OBJECTIVE_TOLERANCE * max(1.0, abs(best)):
                return x, iteration
        elif restarted:
            # a plain proximal step from x no longer descends: x is optimal to rounding
            return x, iteration
        else:
            y = x.copy()
            momentum = 1.0
            restarted = True
    logger.warning(
        "proximal solver stopped after %d iterations without reaching tolerance %.0e",
        MAX_PROXIMAL_ITERATIONS,
        OBJECTIVE_TOLERANCE,
    )
    return x, MAX_PROXIMAL_ITERATIONS


def fit_rbf(
    positions: np.ndarray,
    displacements: np.ndarray,
    *,
    centers: np.ndarray | None = None,
    support_radius: float | None = None,
    reg: RegularizationWeights = NO_REGULARIZATION,
    collocation: np.ndarray | None = None,
    affine: bool = False,
) -> RbfModel:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    displacements = np.asarray(displacements, dtype=np.float64).reshape(-1, 3)
    if len(positions) == 0:
        raise ValueError("fit_rbf needs at least one sample")
    if len(positions) != len(displacements):
        raise ValueError(
            f"{len(positions)} positions but {len(displacements)} displacements"
        )
    centers = positions if centers is None else np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    radius = (
        default_support_radius(centers, reg.support_scale, reg.support_neighbors)
        if support_radius is None
        else float(support_radius)
    )
    if not radius > 0:
        raise ValueError(f"support_radius must be positive, got {radius}")
    if collocation is None and (reg.lambda_div > 0 or reg.lambda_grad > 0):
        collocation = collocation_grid(positions, reg.grid_points)

    frame = _AffineFrame.around(centers) if affine else None
    system = _assemble(positions, displacements, centers, radius, reg, collocation, frame)
    x = _least_squares(system)
    iterations = 0
    if reg.lambda_sparse > 0:
        x, iterations = _fista(system, x)
    logger.debug(
        "fit %d samples on %d centers rho=%.4g objective=%.6g proximal_iterations=%d",
        len(positions),
        len(centers),
        radius,
        _objective(system, x),
        iterations,
    )
    blocks = x.reshape(3, -1)
    n = len(centers)
    return RbfModel(
        centers=centers,
        coefficients=blocks[:, :n].T,
        support_radius=radius,
        affine=None if frame is None else frame.to_affine(blocks[:, n:]),
    )


def rbf_objective(
    model: RbfModel,
    positions: np.ndarray,
    displacements: np.ndarray,
    reg: RegularizationWeights = NO_REGULARIZATION,
    collocation: np.ndarray | None = None,
) -> float:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    displacements = np.asarray(displacements, dtype=np.float64).reshape(-1, 3)
    if collocation is None and (reg.lambda_div > 0 or reg.lambda_grad > 0):
        collocation = collocation_grid(positions, reg.grid_points)
    if model.affine is None:
        system = _assemble(
            positions, displacements, model.centers, model.support_radius, reg, collocation
        )
        return _objective(system, model.coefficients.T.ravel())
    frame = _AffineFrame(np.zeros(3), 1.0)
    system = _assemble(
        positions,
        displacements,
        model.centers,
        model.support_radius,
        reg,
        collocation,
        frame,
        side_conditions=False,
    )
    x = np.hstack([model.coefficients.T, frame.from_affine(model.affine)]).ravel()
    return _objective(system, x)


def trajectory_positions(
    sequence: FrameSequence, trajectories: Sequence[Trajectory]
) -> np.ndarray:
    return np.stack(
        [
            np.stack([sequence.position(pid) for pid in trajectory.points])
            for trajectory in trajectories
        ],
        axis=1,
    )


def fit_displacement_fields(
    sequence: FrameSequence,
    trajectories: Sequence[Trajectory],
    reg: RegularizationWeights,
    *,
    threads: int = 1,
    affine: bool = True,
) -> list[RbfModel]:
    """One Lagrangian field per frame: U_t(x_1) = x_t - x_1, centers at the frame-1 samples."""
    if not trajectories:
        raise DegenerateSystemError("no trajectories to densify")
    tracked = trajectory_positions(sequence, trajectories)
    reference = tracked[0]
    radius = default_support_radius(reference, reg.support_scale, reg.support_neighbors)
    collocation = (
        collocation_grid(reference, reg.grid_points)
        if reg.lambda_div > 0 or reg.lambda_grad > 0
        else None
    )

    def fit_frame(t: int) -> RbfModel:
        return fit_rbf(
            reference,
            tracked[t] - reference,
            centers=reference,
            support_radius=radius,
            reg=reg,
            collocation=collocation,
            affine=affine,
        )

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(fit_frame, range(sequence.T)))
