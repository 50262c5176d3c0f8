from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from flowtrack.errors import ArtifactError


@dataclass(frozen=True, slots=True)
class VolumeImage:
    """Scalar volume indexed voxels[ix, iy, iz]; voxel centres at origin + index * spacing."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        voxels = np.array(self.voxels, dtype=np.float64)
        if voxels.ndim != 3 or min(voxels.shape) < 1:
            raise ValueError(f"voxels must be a non-empty 3D array, got shape {voxels.shape}")
        if not np.isfinite(voxels).all():
            raise ValueError("voxels must be finite")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        voxels.setflags(write=False)
        object.__setattr__(self, "voxels", voxels)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        nx, ny, nz = self.voxels.shape
        return nx, ny, nz

    def voxel_index(self, point: np.ndarray) -> np.ndarray:
        offset = (np.asarray(point, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(
            self.spacing
        )
        return np.floor(offset + 0.5).astype(np.int64)

    def patch(self, center: np.ndarray, radius: int) -> np.ndarray:
        axes = [
            np.clip(np.arange(c - radius, c + radius + 1), 0, n - 1)
            for c, n in zip(center, self.dims, strict=True)
        ]
        return self.voxels[np.ix_(*axes)]


def write_volume(path: Path, image: VolumeImage) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    nx, ny, nz = image.dims
    sx, sy, sz = image.spacing
    ox, oy, oz = image.origin
    header = (
        f"dims {nx} {ny} {nz}\n"
        f"spacing {sx!r} {sy!r} {sz!r}\n"
        f"origin {ox!r} {oy!r} {oz!r}\n"
        "end_header\n"
    )
    payload = np.asarray(image.voxels, dtype="<f4").ravel(order="F").tobytes()
    path.write_bytes(header.encode("utf-8") + payload)


def read_volume(path: Path) -> VolumeImage:
    if not path.exists():
        raise ArtifactError(f"Volume file not found: {path}")
    raw = path.read_bytes()
    marker = b"end_header\n"
    end = raw.find(marker)
    if end < 0:
        raise ArtifactError(f"{path} has no 'end_header' line")
    fields: dict[str, list[str]] = {}
    for line in raw[:end].decode("utf-8").splitlines():
        parts = line.split()
        if parts:
            fields[parts[0]] = parts[1:]
    if "dims" not in fields or "spacing" not in fields:
        raise ArtifactError(f"{path} header needs 'dims' and 'spacing' lines")
    dims = tuple(int(v) for v in fields["dims"])
    spacing = tuple(float(v) for v in fields["spacing"])
    origin = tuple(float(v) for v in fields.get("origin", ["0", "0", "0"]))
    data = np.frombuffer(raw[end + len(marker) :], dtype="<f4")
    expected = int(np.prod(dims))
    if data.size != expected:
        raise ArtifactError(f"{path} holds {data.size} voxels, header declares {expected}")
    voxels = data.astype(np.float64).reshape(dims, order="F")
    return VolumeImage(voxels=voxels, spacing=spacing, origin=origin)  # type: ignore[arg-type]
