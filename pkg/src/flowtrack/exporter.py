from __future__ import annotations

import json
from collections.abc import Sequence
from functools import cache
from pathlib import Path

from jsonschema import ValidationError, validate

from flowtrack.dense_field import RbfModel
from flowtrack.errors import ArtifactError
from flowtrack.models import Trajectory
from flowtrack.solver import FlowSolution
from flowtrack.utils import read_json, sha256_file, write_json

MANIFEST_NAME = "manifest.json"


@cache
def load_schema(name: str) -> dict[str, object]:
    schema_path = Path(__file__).parent / "schemas" / f"{name}.v1.schema.json"
    return json.loads(schema_path.read_text(encoding="utf-8"))


def _checked(payload: dict[str, object], schema: str, path: Path) -> dict[str, object]:
    try:
        validate(instance=payload, schema=load_schema(schema))
    except ValidationError as exc:
        location = "/".join(str(part) for part in exc.absolute_path) or "<root>"
        raise ArtifactError(
            f"{path} does not match {schema} schema at {location}: {exc.message}"
        ) from exc
    return payload


def solution_to_dict(
    trajectories: Sequence[Trajectory],
    solution: FlowSolution,
    *,
    frames: int,
    extra: dict[str, object] | None = None,
) -> dict[str, object]:
    metadata = solution.to_dict()
    metadata.update(extra or {})
    return {
        "schema_version": "v1",
        "frames": frames,
        "trajectories": [trajectory.to_dict() for trajectory in trajectories],
        "metadata": metadata,
    }


def write_trajectories(path: Path, payload: dict[str, object]) -> None:
    write_json(path, _checked(payload, "trajectories", path))


def read_trajectories(path: Path) -> tuple[list[Trajectory], dict[str, object]]:
    payload = _checked(read_json(path), "trajectories", path)
    items: list[dict[str, object]] = payload["trajectories"]  # type: ignore[assignment]
    trajectories = [Trajectory.from_dict(item) for item in items]
    frames = int(payload["frames"])  # type: ignore[arg-type]
    for index, trajectory in enumerate(trajectories, start=1):
        if len(trajectory.points) != frames:
            raise ArtifactError(
                f"{path} trajectory {index} has {len(trajectory.points)} points, expected {frames}"
            )
    return trajectories, payload["metadata"]  # type: ignore[return-value]


def write_model(path: Path, model: RbfModel, *, frame: int | None = None) -> None:
    payload = model.to_dict()
    if frame is not None:
        payload["frame"] = frame
    write_json(path, _checked(payload, "rbf_model", path))


def read_model(path: Path) -> RbfModel:
    payload = _checked(read_json(path), "rbf_model", path)
    try:
        return RbfModel.from_dict(payload)
    except ValueError as exc:
        raise ArtifactError(f"{path}: {exc}") from exc


def write_manifest(session_dir: Path) -> Path:
    artifacts = []
    for path in sorted(p for p in session_dir.rglob("*") if p.is_file()):
        relative = path.relative_to(session_dir).as_posix()
        if relative == MANIFEST_NAME:
            continue
        artifacts.append(
            {
                "file": relative,
                "checksum_sha256": sha256_file(path),
                "size_bytes": path.stat().st_size,
            }
        )
    manifest_path = session_dir / MANIFEST_NAME
    write_json(
        manifest_path,
        {"schema_version": "v1", "artifact_count": len(artifacts), "artifacts": artifacts},
    )
    return manifest_path
