from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from flowtrack.dense_field import RbfModel, evaluate_jacobian
from flowtrack.errors import OnAxisError
from flowtrack.models import Point3
from flowtrack.utils import unit_vector, write_csv

logger = logging.getLogger(__name__)

ON_AXIS_TOLERANCE = 1e-9
LEVELS = ("basal", "mid", "apical")


@dataclass(frozen=True, slots=True)
class LvAxes:
    """Left-ventricle frame: long axis pointing apex to base, origin at the apex."""

    long_axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    apex_base_origin: Point3 = field(default_factory=lambda: Point3(0.0, 0.0, 0.0))
    anterior: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        axis = unit_vector(self.long_axis)
        anterior = np.asarray(self.anterior, dtype=np.float64).reshape(3)
        if np.linalg.norm(anterior - (anterior @ axis) * axis) < 1e-6:
            raise ValueError("anterior direction must not be parallel to the long axis")
        object.__setattr__(self, "long_axis", tuple(axis.tolist()))
        object.__setattr__(self, "anterior", tuple(float(v) for v in anterior))

    @property
    def axis(self) -> np.ndarray:
        return np.asarray(self.long_axis, dtype=np.float64)

    def to_dict(self) -> dict[str, object]:
        return {
            "long_axis": list(self.long_axis),
            "apex_base_origin": self.apex_base_origin.to_list(),
            "anterior": list(self.anterior),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, object]) -> LvAxes:
        defaults = cls()
        return cls(
            long_axis=tuple(payload.get("long_axis", defaults.long_axis)),  # type: ignore[arg-type]
            apex_base_origin=Point3.from_iterable(
                payload.get("apex_base_origin", defaults.apex_base_origin.to_list())  # type: ignore
            ),
            anterior=tuple(payload.get("anterior", defaults.anterior)),  # type: ignore[arg-type]
        )


@dataclass(frozen=True, slots=True)
class StrainSample:
    position: Point3
    E: np.ndarray  # noqa: N815
    radial: float
    circumferential: float
    longitudinal: float


def lagrangian_strain(jacobian: np.ndarray) -> np.ndarray:
    j = np.asarray(jacobian, dtype=np.float64)
    if j.shape != (3, 3):
        raise ValueError(f"displacement gradient must be 3x3, got {j.shape}")
    if not np.isfinite(j).all():
        raise ValueError("displacement gradient has non-finite entries")
    e = 0.5 * (j + j.T + j.T @ j)
    return 0.5 * (e + e.T)


def lv_directions(axes: LvAxes, position: Point3 | np.ndarray) -> tuple[np.ndarray, ...]:
    point = position.as_array() if isinstance(position, Point3) else np.asarray(position, float)
    longitudinal = axes.axis
    relative = point - axes.apex_base_origin.as_array()
    radial = relative - (relative @ longitudinal) * longitudinal
    distance = float(np.linalg.norm(radial))
    if distance < ON_AXIS_TOLERANCE:
        raise OnAxisError(
            f"point {point.tolist()} lies on the long axis; radial direction is undefined"
        )
    radial = radial / distance
    circumferential = np.cross(longitudinal, radial)
    return radial, circumferential, longitudinal


def strain_at(model: RbfModel, axes: LvAxes, position: np.ndarray) -> StrainSample:
    radial, circumferential, longitudinal = lv_directions(axes, position)
    e = lagrangian_strain(evaluate_jacobian(model, np.asarray(position, dtype=np.float64)))
    return StrainSample(
        position=Point3.from_iterable(position),
        E=e,
        radial=float(radial @ e @ radial),
        circumferential=float(circumferential @ e @ circumferential),
        longitudinal=float(longitudinal @ e @ longitudinal),
    )


def strain_field(
    model: RbfModel, axes: LvAxes, points: np.ndarray
) -> tuple[list[StrainSample], list[int]]:
    """Strain at every query point; on-axis points are skipped and their indices returned."""
    samples: list[StrainSample] = []
    skipped: list[int] = []
    for index, point in enumerate(np.asarray(points, dtype=np.float64).reshape(-1, 3)):
        try:
            samples.append(strain_at(model, axes, point))
        except OnAxisError:
            skipped.append(index)
    if skipped:
        logger.warning("skipped %d on-axis strain point(s)", len(skipped))
    return samples, skipped


def segment_labels(
    axes: LvAxes,
    positions: np.ndarray,
    axial_range: tuple[float, float] | None = None,
) -> np.ndarray:
    """Sector id 1..16: six basal, six mid (60 degree sectors) and four apical (90 degree).

    Levels split the axial extent into thirds; sectors count counter-clockwise about the long
    axis starting at the anterior direction.
    """
    points = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    axis = axes.axis
    relative = points - axes.apex_base_origin.as_array()
    height = relative @ axis
    low, high = axial_range if axial_range is not None else (height.min(), height.max())
    span = max(high - low, 1e-12)
    third = np.clip(np.floor((height - low) / span * 3.0), 0, 2).astype(int)  # 0 apical

    anterior = np.asarray(axes.anterior, dtype=np.float64)
    a = anterior - (anterior @ axis) * axis
    a /= np.linalg.norm(a)
    b = np.cross(axis, a)
    angle = np.mod(np.arctan2(relative @ b, relative @ a), 2.0 * math.pi)

    six = np.minimum(np.floor(angle / (math.pi / 3.0)), 5).astype(int)
    four = np.minimum(np.floor(angle / (math.pi / 2.0)), 3).astype(int)
    labels = np.where(third == 2, 1 + six, np.where(third == 1, 7 + six, 13 + four))
    return labels.astype(int)


def segment_level(segment: int) -> str:
    if 1 <= segment <= 6:
        return "basal"
    if 7 <= segment <= 12:
        return "mid"
    if 13 <= segment <= 16:
        return "apical"
    raise ValueError(f"segment must lie in 1..16, got {segment}")


@dataclass(frozen=True, slots=True)
class SegmentStrain:
    frame: int
    segment: int
    radial: float
    circumferential: float
    longitudinal: float

    @property
    def level(self) -> str:
        return segment_level(self.segment)


def segment_curves(
    frames: Sequence[Sequence[StrainSample]],
    labels: np.ndarray,
) -> list[SegmentStrain]:
    curves: list[SegmentStrain] = []
    for t, samples in enumerate(frames, start=1):
        if len(samples) != len(labels):
            raise ValueError(f"frame {t} has {len(samples)} samples for {len(labels)} labels")
        values = np.array(
            [[s.radial, s.circumferential, s.longitudinal] for s in samples], dtype=np.float64
        ).reshape(-1, 3)
        for segment in sorted(set(int(v) for v in labels)):
            mean = values[labels == segment].mean(axis=0)
            curves.append(SegmentStrain(t, segment, float(mean[0]), float(mean[1]), float(mean[2])))
    return curves


def write_strain_csv(path: Path, frames: Sequence[Sequence[StrainSample]]) -> None:
    rows = []
    for t, samples in enumerate(frames, start=1):
        for sample in samples:
            rows.append(
                [
                    t,
                    sample.position.x,
                    sample.position.y,
                    sample.position.z,
                    sample.radial,
                    sample.circumferential,
                    sample.longitudinal,
                ]
            )
    write_csv(path, ["t", "x", "y", "z", "Err", "Ecc", "Ell"], rows)


def write_segments_csv(path: Path, curves: Sequence[SegmentStrain]) -> None:
    write_csv(
        path,
        ["t", "segment", "level", "Err", "Ecc", "Ell"],
        [
            [c.frame, c.segment, c.level, c.radial, c.circumferential, c.longitudinal]
            for c in curves
        ],
    )
