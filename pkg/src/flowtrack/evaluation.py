from __future__ import annotations

import itertools
import logging
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from flowtrack.errors import UnmatchedTrajectoryError
from flowtrack.features import FeatureProvider, make_provider
from flowtrack.models import (
    ABLATION_CONSTRAINTS,
    ConstraintSet,
    FrameSequence,
    TrackingConfig,
    Trajectory,
    find_shared_nodes,
)
from flowtrack.network import build_network, threshold_edges
from flowtrack.phantoms import GroundTruth
from flowtrack.solver import extract_trajectories, solve_flow
from flowtrack.utils import write_csv
from flowtrack.volumes import VolumeImage

logger = logging.getLogger(__name__)

MATCH_TOLERANCE = 1e-6


@dataclass(frozen=True, slots=True)
class TrackingErrorReport:
    overall_median: float
    overall_iqr: float
    es_median: float
    es_iqr: float
    ed_median: float
    ed_iqr: float
    trajectory_count: int = 0

    def to_dict(self) -> dict[str, object]:
        return {
            "overall_median": self.overall_median,
            "overall_iqr": self.overall_iqr,
            "es_median": self.es_median,
            "es_iqr": self.es_iqr,
            "ed_median": self.ed_median,
            "ed_iqr": self.ed_iqr,
            "trajectory_count": self.trajectory_count,
        }

    def values(self) -> list[float]:
        return [
            self.overall_median,
            self.overall_iqr,
            self.es_median,
            self.es_iqr,
            self.ed_median,
            self.ed_iqr,
        ]


def _median_iqr(values: np.ndarray) -> tuple[float, float]:
    q1, median, q3 = np.percentile(values, [25.0, 50.0, 75.0])
    return float(median), float(max(q3 - q1, 0.0))


def tracking_error(
    trajectories: Sequence[Trajectory],
    sequence: FrameSequence,
    ground_truth: GroundTruth,
    *,
    tolerance: float = MATCH_TOLERANCE,
) -> TrackingErrorReport:
    """Euclidean error of tracked positions against ground truth, pooled over frames 2..T.

    Each trajectory is paired with the ground-truth trajectory whose frame-1 position coincides
    with its own start. ES is the phantom's end-systolic frame, ED the last frame.
    """
    if not trajectories:
        raise UnmatchedTrajectoryError("no trajectories to evaluate")
    if ground_truth.frame_count != sequence.T:
        raise ValueError(
            f"ground truth has {ground_truth.frame_count} frames, sequence has {sequence.T}"
        )
    starts = np.stack([sequence.position(tr.start) for tr in trajectories])
    distance, match = cKDTree(ground_truth.positions[:, 0, :]).query(starts)
    unmatched = np.flatnonzero(distance > tolerance)
    if unmatched.size:
        first = trajectories[int(unmatched[0])].start
        raise UnmatchedTrajectoryError(
            f"{unmatched.size} trajectory start(s) have no ground-truth start within "
            f"{tolerance:g}; first is (t=1, i={first.index}) "
            f"at distance {distance[unmatched[0]]:.3g}"
        )
    tracked = np.stack(
        [np.stack([sequence.position(pid) for pid in tr.points]) for tr in trajectories]
    )
    errors = np.linalg.norm(tracked - ground_truth.positions[match], axis=2)
    overall = _median_iqr(errors[:, 1:].ravel())
    es = _median_iqr(errors[:, ground_truth.es_frame - 1])
    ed = _median_iqr(errors[:, -1])
    return TrackingErrorReport(*overall, *es, *ed, trajectory_count=len(trajectories))


@dataclass(frozen=True, slots=True)
class AblationRow:
    constraints: ConstraintSet
    report: TrackingErrorReport | None
    trajectory_count: int
    shared_nodes: int
    objective: float
    untracked: int = 0


def untracked_count(sequence: FrameSequence, trajectories: Sequence[Trajectory]) -> int:
    """Frame-1 points that start no trajectory."""
    return sequence.sizes[0] - len({trajectory.start for trajectory in trajectories})


def constraint_ablation(
    sequence: FrameSequence,
    ground_truth: GroundTruth,
    config: TrackingConfig,
    provider: FeatureProvider,
    *,
    images: Sequence[VolumeImage | None] | None = None,
    rows: Sequence[ConstraintSet] = ABLATION_CONSTRAINTS,
    threads: int = 1,
) -> list[AblationRow]:
    """Solve every constraint row on one thresholded network (loop edges always present)."""
    network = threshold_edges(
        build_network(sequence, provider, config, images=images, loop_edges=True), config.p_th
    )

    def run(constraints: ConstraintSet) -> AblationRow:
        solution = solve_flow(network, constraints)
        trajectories = extract_trajectories(solution, network)
        report = tracking_error(trajectories, sequence, ground_truth) if trajectories else None
        return AblationRow(
            constraints=constraints,
            report=report,
            trajectory_count=len(trajectories),
            shared_nodes=len(find_shared_nodes(trajectories)),
            objective=solution.objective,
            untracked=untracked_count(sequence, trajectories),
        )

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(run, rows))
    for row in results:
        logger.debug(
            "ablation %s: trajectories=%d untracked=%d shared=%d median=%s",
            row.constraints.label(),
            row.trajectory_count,
            row.untracked,
            row.shared_nodes,
            None if row.report is None else f"{row.report.overall_median:.4g}",
        )
    return results


def write_ablation_csv(path: Path, rows: Sequence[AblationRow]) -> None:
    header = [
        "constraints",
        "overall_median",
        "overall_iqr",
        "es_median",
        "es_iqr",
        "ed_median",
        "ed_iqr",
        "trajectories",
        "untracked",
        "shared_nodes",
    ]
    body = []
    for row in rows:
        body.append(
            [
                "+".join(row.constraints.names()),
                *_report_values(row.report),
                row.trajectory_count,
                row.untracked,
                row.shared_nodes,
            ]
        )
    write_csv(path, header, body)


def _report_values(report: TrackingErrorReport | None) -> list[float]:
    return report.values() if report is not None else [float("nan")] * 6


@dataclass(frozen=True, slots=True)
class SweepRow:
    setting: dict[str, object]
    report: TrackingErrorReport | None
    trajectory_count: int
    untracked: int


def sweep_settings(**grids: Sequence[object]) -> list[dict[str, object]]:
    """Cartesian product of the given value lists, first keyword varying slowest."""
    names = [name for name, values in grids.items() if len(values) > 0]
    return [
        dict(zip(names, combination, strict=True))
        for combination in itertools.product(*(grids[name] for name in names))
    ]


def tracking_sweep(
    sequence: FrameSequence,
    ground_truth: GroundTruth,
    config: TrackingConfig,
    settings: Sequence[Mapping[str, object]],
    *,
    images: Sequence[VolumeImage | None] | None = None,
    threads: int = 1,
) -> list[SweepRow]:
    """Track once per setting (TrackingConfig overrides) and score each run against the truth."""

    def run(setting: Mapping[str, object]) -> SweepRow:
        tracking = replace(config, **setting)
        provider = make_provider(
            tracking.feature,
            patch_radius=tracking.patch_radius,
            bins=tracking.histogram_bins,
            max_magnitude=tracking.gradient_max,
        )
        network = threshold_edges(
            build_network(sequence, provider, tracking, images=images), tracking.p_th
        )
        trajectories = extract_trajectories(solve_flow(network, tracking.constraints), network)
        report = tracking_error(trajectories, sequence, ground_truth) if trajectories else None
        return SweepRow(
            setting=dict(setting),
            report=report,
            trajectory_count=len(trajectories),
            untracked=untracked_count(sequence, trajectories),
        )

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(run, settings))
    for row in results:
        logger.debug(
            "sweep %s: trajectories=%d untracked=%d median=%s",
            row.setting,
            row.trajectory_count,
            row.untracked,
            None if row.report is None else f"{row.report.overall_median:.4g}",
        )
    return results


def write_sweep_csv(path: Path, rows: Sequence[SweepRow]) -> None:
    names = list(rows[0].setting) if rows else []
    header = [
        *names,
        "overall_median",
        "overall_iqr",
        "es_median",
        "es_iqr",
        "ed_median",
        "ed_iqr",
        "trajectories",
        "untracked",
    ]
    body = [
        [
            *(row.setting[name] for name in names),
            *_report_values(row.report),
            row.trajectory_count,
            row.untracked,
        ]
        for row in rows
    ]
    write_csv(path, header, body)
