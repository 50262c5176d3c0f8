"""Feature providers F(x) for candidate selection and edge weighting.

Every provider maps a point (and optionally the frame's volume) to a fixed-length vector and
defines a symmetric, non-negative distance with d(a, a) = 0.
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from flowtrack.errors import ImageRequiredError
from flowtrack.volumes import VolumeImage


@runtime_checkable
class FeatureProvider(Protocol):
    name: str

    def extract(self, point: np.ndarray, image: VolumeImage | None = None) -> np.ndarray: ...

    def distance(self, a: np.ndarray, b: np.ndarray) -> float: ...

    def pairwise(self, a: np.ndarray, b: np.ndarray) -> np.ndarray: ...


def extract_frame(
    provider: FeatureProvider, points: np.ndarray, image: VolumeImage | None = None
) -> np.ndarray:
    rows = [provider.extract(point, image) for point in np.asarray(points).reshape(-1, 3)]
    if not rows:
        return np.empty((0, 1), dtype=np.float64)
    return np.vstack(rows)


def _euclidean_pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)


class PositionFeature:
    name = "position"

    def extract(self, point: np.ndarray, image: VolumeImage | None = None) -> np.ndarray:
        return np.zeros(1, dtype=np.float64)

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))

    def pairwise(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return _euclidean_pairwise(a, b)


class IntensityPatchFeature:
    """Raw intensity patch (x fastest); distance is 1 - NCC."""

    name = "intensity"

    def __init__(self, patch_radius: int = 5) -> None:
        if patch_radius < 0:
            raise ValueError(f"patch_radius must be >= 0, got {patch_radius}")
        self.patch_radius = patch_radius

    def extract(self, point: np.ndarray, image: VolumeImage | None = None) -> np.ndarray:
        if image is None:
            raise ImageRequiredError("intensity patch features need the frame's volume image")
        patch = image.patch(image.voxel_index(point), self.patch_radius)
        return patch.ravel(order="F").astype(np.float64)

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(self.pairwise(np.atleast_2d(a), np.atleast_2d(b))[0, 0])

    def pairwise(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        if a.shape[1] != b.shape[1]:
            raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
        za, flat_a = _standardize(a)
        zb, flat_b = _standardize(b)
        ncc = np.clip(za @ zb.T, -1.0, 1.0)
        distance = 1.0 - ncc
        # zero-variance rows have NCC 0 by convention, except against an identical vector
        flat = flat_a[:, None] | flat_b[None, :]
        if flat.any():
            rows, cols = np.nonzero(flat)
            same = np.all(a[rows] == b[cols], axis=1)
            distance[rows, cols] = np.where(same, 0.0, 1.0)
        return np.maximum(distance, 0.0)


def _standardize(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centered = values - values.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    scale = np.max(np.abs(values), axis=1) if values.size else np.zeros(len(values))
    flat = norms <= 1e-12 * np.maximum(scale, 1.0)
    safe = np.where(flat, 1.0, norms)
    z = centered / safe[:, None]
    z[flat] = 0.0
    return z, flat


class GradientHistogramFeature:
    name = "gradient"

    def __init__(self, patch_radius: int = 5, bins: int = 8, max_magnitude: float = 1.0) -> None:
        if bins < 2:
            raise ValueError(f"bins must be >= 2, got {bins}")
        if max_magnitude <= 0:
            raise ValueError(f"max_magnitude must be positive, got {max_magnitude}")
        self.patch_radius = patch_radius
        self.bins = bins
        self.max_magnitude = max_magnitude

    def extract(self, point: np.ndarray, image: VolumeImage | None = None) -> np.ndarray:
        if image is None:
            raise ImageRequiredError("gradient histogram features need the frame's volume image")
        center = image.voxel_index(point)
        # one voxel of margin so every patch voxel gets a central difference
        padded = image.patch(center, self.patch_radius + 1)
        gradients = np.stack(np.gradient(padded, *image.spacing))[:, 1:-1, 1:-1, 1:-1]
        magnitude = np.sqrt(np.sum(gradients**2, axis=0))
        index = np.clip(
            np.floor(magnitude.ravel() / self.max_magnitude * self.bins).astype(np.int64),
            0,
            self.bins - 1,
        )
        counts = np.bincount(index, minlength=self.bins).astype(np.float64)
        return counts / counts.sum()

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))

    def pairwise(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return _euclidean_pairwise(a, b)


def make_provider(
    name: str,
    *,
    patch_radius: int = 5,
    bins: int = 8,
    max_magnitude: float = 1.0,
) -> FeatureProvider:
    if name == "position":
        return PositionFeature()
    if name == "intensity":
        return IntensityPatchFeature(patch_radius=patch_radius)
    if name == "gradient":
        return GradientHistogramFeature(
            patch_radius=patch_radius, bins=bins, max_magnitude=max_magnitude
        )
    raise ValueError(f"Unknown feature provider '{name}' (expected position, intensity, gradient)")
