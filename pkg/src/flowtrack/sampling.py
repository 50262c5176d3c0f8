from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from flowtrack.errors import EmptySliceError
from flowtrack.models import Point3
from flowtrack.utils import orthonormal_frame, unit_vector

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class CylindricalSamplingSpec:
    z_fr: int = 40
    theta_fr: int = 30
    long_axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    axis_origin: Point3 = field(default_factory=lambda: Point3(0.0, 0.0, 0.0))
    axial_range: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.z_fr < 2:
            raise ValueError(f"z_fr must be >= 2, got {self.z_fr}")
        if self.theta_fr < 3:
            raise ValueError(f"theta_fr must be >= 3, got {self.theta_fr}")
        object.__setattr__(self, "long_axis", tuple(unit_vector(self.long_axis).tolist()))
        if self.axial_range is not None and not self.axial_range[0] < self.axial_range[1]:
            raise ValueError(f"axial_range must be increasing, got {self.axial_range}")

    @property
    def count(self) -> int:
        return self.z_fr * self.theta_fr


def in_vivo_spec(z_slices_available: int) -> CylindricalSamplingSpec:
    if z_slices_available < 1:
        raise ValueError(f"z_slices_available must be >= 1, got {z_slices_available}")
    z_fr = max(25, z_slices_available)
    theta_fr = int(math.floor(z_fr / 1.3 + 0.5))
    return CylindricalSamplingSpec(z_fr=z_fr, theta_fr=theta_fr)


def sample_surface(surface: np.ndarray, spec: CylindricalSamplingSpec) -> np.ndarray:
    """Pick z_fr x theta_fr surface points on a cylindrical grid about the long axis.

    Output is slice-major: row k * theta_fr + j is the surface point of band k closest to the
    ray at angle 2*pi*j/theta_fr. Ties go to the smaller surface index.
    """
    points = np.asarray(surface, dtype=np.float64).reshape(-1, 3)
    axis = np.asarray(spec.long_axis, dtype=np.float64)
    e1, e2 = orthonormal_frame(axis)
    relative = points - spec.axis_origin.as_array()
    axial = relative @ axis
    u = relative @ e1
    v = relative @ e2
    radius = np.hypot(u, v)
    azimuth = np.arctan2(v, u)

    if spec.axial_range is not None:
        low, high = spec.axial_range
    elif len(points):
        low, high = float(axial.min()), float(axial.max())
    else:
        raise EmptySliceError("surface has no points")
    edges = np.linspace(low, high, spec.z_fr + 1)

    rays = 2.0 * np.pi * np.arange(spec.theta_fr) / spec.theta_fr
    samples = np.empty((spec.z_fr, spec.theta_fr, 3), dtype=np.float64)
    for k in range(spec.z_fr):
        upper_ok = axial <= edges[k + 1] if k == spec.z_fr - 1 else axial < edges[k + 1]
        members = np.flatnonzero((axial >= edges[k]) & upper_ok)
        if len(members) == 0:
            raise EmptySliceError(
                f"z-band {k + 1}/{spec.z_fr} [{edges[k]:.4g}, {edges[k + 1]:.4g}) "
                "contains no surface points"
            )
        delta = np.abs(np.angle(np.exp(1j * (azimuth[members][None, :] - rays[:, None]))))
        ray_distance = np.where(
            delta < np.pi / 2.0,
            radius[members][None, :] * np.sin(delta),
            radius[members][None, :],
        )
        # argmin returns the first minimum; members are in ascending index order.
        samples[k] = points[members[np.argmin(ray_distance, axis=1)]]
    logger.debug("sampled %d points from %d surface points", spec.count, len(points))
    return samples.reshape(-1, 3)
