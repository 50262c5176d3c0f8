from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import numpy as np

from flowtrack.errors import ArtifactError
from flowtrack.models import FrameSequence
from flowtrack.phantoms import GroundTruth
from flowtrack.utils import read_csv, read_json, write_csv, write_json

POINTS_HEADER = ["t", "i", "x", "y", "z"]
GROUND_TRUTH_HEADER = ["trajectory", "t", "x", "y", "z"]


def write_points_csv(path: Path, sequence: FrameSequence) -> None:
    rows = []
    for t, frame in enumerate(sequence.frames, start=1):
        for i, (x, y, z) in enumerate(frame.tolist(), start=1):
            rows.append([t, i, float(x), float(y), float(z)])
    write_csv(path, POINTS_HEADER, rows)


def _parse_row(path: Path, line: int, row: list[str], width: int) -> list[str]:
    if len(row) != width:
        raise ArtifactError(f"{path}:{line} has {len(row)} columns, expected {width}")
    return row


def read_points_csv(path: Path, *, periodic: bool = False) -> FrameSequence:
    frames: dict[int, dict[int, tuple[float, float, float]]] = defaultdict(dict)
    for line, row in enumerate(read_csv(path, POINTS_HEADER), start=2):
        t, i, x, y, z = _parse_row(path, line, row, 5)
        try:
            frames[int(t)][int(i)] = (float(x), float(y), float(z))
        except ValueError as exc:
            raise ArtifactError(f"{path}:{line} is not numeric: {row}") from exc
    if not frames:
        raise ArtifactError(f"{path} holds no points")
    if sorted(frames) != list(range(1, max(frames) + 1)):
        raise ArtifactError(f"{path} frames must be numbered 1..T, got {sorted(frames)}")
    ordered = []
    for t in sorted(frames):
        points = frames[t]
        if sorted(points) != list(range(1, len(points) + 1)):
            raise ArtifactError(f"{path} frame {t} indices must be 1..N(t)")
        ordered.append(np.array([points[i] for i in sorted(points)], dtype=np.float64))
    return FrameSequence(frames=tuple(ordered), periodic=periodic)


def write_ground_truth_csv(path: Path, ground_truth: GroundTruth) -> None:
    rows = []
    for k, trajectory in enumerate(ground_truth.positions.tolist(), start=1):
        for t, (x, y, z) in enumerate(trajectory, start=1):
            rows.append([k, t, float(x), float(y), float(z)])
    write_csv(path, GROUND_TRUTH_HEADER, rows)


def read_ground_truth_csv(path: Path, es_frame: int) -> GroundTruth:
    tracks: dict[int, dict[int, tuple[float, float, float]]] = defaultdict(dict)
    for line, row in enumerate(read_csv(path, GROUND_TRUTH_HEADER), start=2):
        k, t, x, y, z = _parse_row(path, line, row, 5)
        try:
            tracks[int(k)][int(t)] = (float(x), float(y), float(z))
        except ValueError as exc:
            raise ArtifactError(f"{path}:{line} is not numeric: {row}") from exc
    if not tracks:
        raise ArtifactError(f"{path} holds no ground truth")
    frame_counts = {len(frames) for frames in tracks.values()}
    if len(frame_counts) != 1:
        raise ArtifactError(f"{path} trajectories have differing frame counts {frame_counts}")
    positions = np.array(
        [[tracks[k][t] for t in sorted(tracks[k])] for k in sorted(tracks)], dtype=np.float64
    )
    return GroundTruth(positions=positions, es_frame=es_frame)


def write_sequence_meta(
    path: Path,
    *,
    phantom: str,
    sequence: FrameSequence,
    es_frame: int,
    seed: int,
    parameters: dict[str, object],
) -> None:
    write_json(
        path,
        {
            "schema_version": "v1",
            "phantom": phantom,
            "frames": sequence.T,
            "points_per_frame": list(sequence.sizes),
            "periodic": sequence.periodic,
            "es_frame": es_frame,
            "seed": seed,
            "parameters": parameters,
        },
    )


def read_sequence_meta(session_dir: Path) -> dict[str, object]:
    path = session_dir / "meta" / "sequence.json"
    if not path.exists():
        return {}
    return read_json(path)
