"""Ground-truth phantoms: 1D+t toys and cyclically contracting, twisting ellipsoidal shells."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from flowtrack.models import FrameSequence, Point3
from flowtrack.sampling import CylindricalSamplingSpec, sample_surface
from flowtrack.volumes import VolumeImage

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class GroundTruth:
    positions: np.ndarray  # (trajectories, frames, 3)
    es_frame: int

    def __post_init__(self) -> None:
        positions = np.array(self.positions, dtype=np.float64)
        if positions.ndim != 3 or positions.shape[2] != 3:
            raise ValueError(f"positions must have shape (n, T, 3), got {positions.shape}")
        if not 1 <= self.es_frame <= positions.shape[1]:
            raise ValueError(f"es_frame {self.es_frame} outside 1..{positions.shape[1]}")
        positions.setflags(write=False)
        object.__setattr__(self, "positions", positions)

    @property
    def trajectory_count(self) -> int:
        return self.positions.shape[0]

    @property
    def frame_count(self) -> int:
        return self.positions.shape[1]


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _observe(
    truth: np.ndarray, noise: float, shuffle: bool, rng: np.random.Generator
) -> list[np.ndarray]:
    """Frames as seen by the tracker: jitter and reorder frames 2..T, frame 1 stays exact."""
    frames = [truth[:, 0, :].copy()]
    for t in range(1, truth.shape[1]):
        frame = truth[:, t, :].copy()
        if noise > 0:
            frame = frame + rng.normal(0.0, noise, size=frame.shape)
        if shuffle:
            frame = frame[rng.permutation(len(frame))]
        frames.append(frame)
    return frames


def gen_toy_1d(
    points_per_frame: int,
    frames: int,
    *,
    noise: float = 0.0,
    crossing: bool = False,
    shuffle: bool = False,
    seed: int = 0,
) -> tuple[FrameSequence, GroundTruth]:
    if points_per_frame < 2:
        raise ValueError(f"points_per_frame must be >= 2, got {points_per_frame}")
    if frames < 3:
        raise ValueError(f"frames must be >= 3, got {frames}")
    rng = _rng(seed)
    truth = np.zeros((points_per_frame, frames, 3), dtype=np.float64)
    truth[:, :, 0] = np.arange(points_per_frame, dtype=np.float64)[:, None]
    if crossing:
        lower = points_per_frame // 2 - 1
        progress = np.arange(frames, dtype=np.float64) / (frames - 1)
        truth[lower, :, 0] = lower + progress
        truth[lower + 1, :, 0] = lower + 1 - progress

    observed = [truth[:, 0, :].copy()]
    for t in range(1, frames):
        frame = truth[:, t, :].copy()
        if noise > 0:
            frame[:, 0] += rng.normal(0.0, noise, size=points_per_frame)
        if shuffle:
            frame = frame[rng.permutation(points_per_frame)]
        observed.append(frame)
    sequence = FrameSequence(frames=tuple(observed), periodic=False)
    return sequence, GroundTruth(positions=truth, es_frame=frames // 2 + 1)


@dataclass(frozen=True, slots=True)
class ShellGeometry:
    """Truncated prolate ellipsoids about the z axis, apex down, base plane at z = 0 (mm)."""

    endo_radius: float = 20.0
    endo_height: float = 40.0
    epi_radius: float = 30.0
    epi_height: float = 50.0
    truncation: float = 0.9

    def shells(self) -> tuple[tuple[float, float], ...]:
        return ((self.endo_radius, self.endo_height), (self.epi_radius, self.epi_height))

    @property
    def z_range(self) -> tuple[float, float]:
        return (-self.epi_height, 0.0)


@dataclass(frozen=True, slots=True)
class ShellMotion:
    frames: int
    contraction: float = 0.15
    twist: float = 0.1
    z_range: tuple[float, float] = (-50.0, 0.0)

    def __post_init__(self) -> None:
        if self.frames < 4:
            raise ValueError(f"frames must be >= 4, got {self.frames}")
        for name in ("contraction", "twist"):
            value = getattr(self, name)
            if not 0.0 <= value < 0.5:
                raise ValueError(f"{name} amplitude must lie in [0, 0.5), got {value}")

    def scale(self, phase: float) -> float:
        return 1.0 - self.contraction * math.sin(math.pi * phase / self.frames) ** 2

    def angle(self, phase: float, z: np.ndarray) -> np.ndarray:
        low, high = self.z_range
        height = np.clip((np.asarray(z, dtype=np.float64) - low) / (high - low), 0.0, 1.0)
        return self.twist * math.sin(2.0 * math.pi * phase / self.frames) * height

    @property
    def es_frame(self) -> int:
        return self.frames // 2 + 1


def motion_map(points: np.ndarray, phase: float, motion: ShellMotion) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rho = motion.scale(phase)
    theta = motion.angle(phase, points[:, 2])
    cos, sin = np.cos(theta), np.sin(theta)
    x = rho * (cos * points[:, 0] - sin * points[:, 1])
    y = rho * (sin * points[:, 0] + cos * points[:, 1])
    return np.stack([x, y, points[:, 2]], axis=1)


def inverse_motion_map(points: np.ndarray, phase: float, motion: ShellMotion) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rho = motion.scale(phase)
    theta = motion.angle(phase, points[:, 2])
    cos, sin = np.cos(theta), np.sin(theta)
    x = (cos * points[:, 0] + sin * points[:, 1]) / rho
    y = (-sin * points[:, 0] + cos * points[:, 1]) / rho
    return np.stack([x, y, points[:, 2]], axis=1)


def step_motion(points: np.ndarray, phase: int, motion: ShellMotion) -> np.ndarray:
    return motion_map(inverse_motion_map(points, phase, motion), phase + 1, motion)


def analytic_strain(phase: float, motion: ShellMotion) -> float:
    """Radial and circumferential Lagrangian strain of the untwisted phantom, 0.5 (rho^2 - 1)."""
    return 0.5 * (motion.scale(phase) ** 2 - 1.0)


def _dense_shell(radius: float, height: float, z_low: float, levels: int, rays: int) -> np.ndarray:
    z = np.linspace(z_low, 0.0, levels)
    angles = 2.0 * math.pi * np.arange(rays) / rays
    ring = radius * np.sqrt(np.clip(1.0 - (z / height) ** 2, 0.0, None))
    zz, aa = np.meshgrid(z, angles, indexing="ij")
    rr = np.repeat(ring[:, None], rays, axis=1)
    return np.stack([rr * np.cos(aa), rr * np.sin(aa), zz], axis=-1).reshape(-1, 3)


def shell_reference_points(
    z_fr: int, theta_fr: int, geometry: ShellGeometry | None = None
) -> np.ndarray:
    geometry = geometry or ShellGeometry()
    samples = []
    for radius, height in geometry.shells():
        z_low = -geometry.truncation * height
        dense = _dense_shell(radius, height, z_low, 8 * z_fr, 8 * theta_fr)
        spec = CylindricalSamplingSpec(
            z_fr=z_fr,
            theta_fr=theta_fr,
            long_axis=(0.0, 0.0, 1.0),
            axis_origin=Point3(0.0, 0.0, 0.0),
            axial_range=(z_low, 0.0),
        )
        samples.append(sample_surface(dense, spec))
    return np.vstack(samples)


@dataclass(frozen=True, slots=True)
class IntensityTexture:
    wavevectors: np.ndarray
    phases: np.ndarray
    amplitudes: np.ndarray

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        components: int = 50,
        wavelength_range: tuple[float, float] = (6.0, 20.0),
    ) -> IntensityTexture:
        directions = rng.normal(size=(components, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        wavelengths = rng.uniform(*wavelength_range, size=components)
        return cls(
            wavevectors=directions * (2.0 * math.pi / wavelengths)[:, None],
            phases=rng.uniform(0.0, 2.0 * math.pi, size=components),
            amplitudes=np.full(components, 1.0 / math.sqrt(components)),
        )

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.cos(points @ self.wavevectors.T + self.phases) @ self.amplitudes


def _volume_grid(
    extent_low: np.ndarray, extent_high: np.ndarray, voxel_size: float
) -> tuple[np.ndarray, tuple[int, int, int]]:
    dims = tuple(int(n) for n in np.ceil((extent_high - extent_low) / voxel_size).astype(int) + 1)
    axes = [extent_low[k] + voxel_size * np.arange(dims[k]) for k in range(3)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel(order="F") for m in mesh], axis=1), dims  # type: ignore[return-value]


@dataclass(frozen=True, slots=True)
class ShellPhantom:
    sequence: FrameSequence
    ground_truth: GroundTruth
    volumes: tuple[VolumeImage, ...]
    motion: ShellMotion
    geometry: ShellGeometry = field(default_factory=ShellGeometry)

    def parameters(self) -> dict[str, object]:
        return {
            "contraction": self.motion.contraction,
            "twist": self.motion.twist,
            "z_range": list(self.motion.z_range),
            "endo_radius": self.geometry.endo_radius,
            "endo_height": self.geometry.endo_height,
            "epi_radius": self.geometry.epi_radius,
            "epi_height": self.geometry.epi_height,
            "truncation": self.geometry.truncation,
        }


def gen_cyclic_shells(
    z_fr: int,
    theta_fr: int,
    frames: int,
    contraction_amplitude: float,
    twist_amplitude: float,
    seed: int,
    *,
    noise: float = 0.0,
    shuffle: bool = False,
    with_volumes: bool = True,
    voxel_size: float = 2.0,
    margin_voxels: int = 8,
    geometry: ShellGeometry | None = None,
) -> ShellPhantom:
    geometry = geometry or ShellGeometry()
    motion = ShellMotion(
        frames=frames,
        contraction=contraction_amplitude,
        twist=twist_amplitude,
        z_range=geometry.z_range,
    )
    rng = _rng(seed)
    reference = shell_reference_points(z_fr, theta_fr, geometry)
    truth = np.stack([motion_map(reference, phase, motion) for phase in range(frames)], axis=1)
    observed = _observe(truth, noise, shuffle, rng)
    sequence = FrameSequence(frames=tuple(observed), periodic=True)
    ground_truth = GroundTruth(positions=truth, es_frame=motion.es_frame)

    volumes: list[VolumeImage] = []
    if with_volumes:
        texture = IntensityTexture.random(rng)
        margin = margin_voxels * voxel_size
        low = truth.reshape(-1, 3).min(axis=0) - margin
        high = truth.reshape(-1, 3).max(axis=0) + margin
        grid, dims = _volume_grid(low, high, voxel_size)
        for phase in range(frames):
            values = texture(inverse_motion_map(grid, phase, motion))
            volumes.append(
                VolumeImage(
                    voxels=values.reshape(dims, order="F"),
                    spacing=(voxel_size, voxel_size, voxel_size),
                    origin=tuple(low.tolist()),  # type: ignore[arg-type]
                )
            )
    logger.debug(
        "shell phantom: %d points x %d frames, volumes=%d", len(reference), frames, len(volumes)
    )
    return ShellPhantom(
        sequence=sequence,
        ground_truth=ground_truth,
        volumes=tuple(volumes),
        motion=motion,
        geometry=geometry,
    )
