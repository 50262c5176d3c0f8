from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from flowtrack.dense_field import RbfModel
from flowtrack.errors import ArtifactError
from flowtrack.exporter import (
    read_model,
    read_trajectories,
    solution_to_dict,
    write_manifest,
    write_model,
    write_trajectories,
)
from flowtrack.models import ConstraintSet, PointId
from flowtrack.solver import extract_trajectories, solve_flow
from flowtrack.utils import read_json, write_json


def _solved_payload(network_factory) -> dict[str, object]:
    weights = {(1, 1, 1): 0.9, (1, 2, 2): 0.8, (2, 1, 1): 0.7, (2, 2, 2): 0.6}
    network = network_factory([2, 2, 2], weights)
    solution = solve_flow(network, ConstraintSet(bal=True))
    trajectories = extract_trajectories(solution, network)
    return solution_to_dict(trajectories, solution, frames=3, extra={"shared_nodes": 0})


def test_trajectories_file_keeps_paths_and_metadata(tmp_path: Path, network_factory) -> None:
    path = tmp_path / "tracking" / "trajectories.json"
    write_trajectories(path, _solved_payload(network_factory))
    trajectories, metadata = read_trajectories(path)
    assert [tr.points for tr in trajectories] == [
        (PointId(1, 1), PointId(2, 1), PointId(3, 1)),
        (PointId(1, 2), PointId(2, 2), PointId(3, 2)),
    ]
    assert all(tr.loop_closure is None for tr in trajectories)
    assert metadata["constraints"] == ["out", "bal"]
    assert metadata["objective"] == pytest.approx(3.0)
    assert metadata["shared_nodes"] == 0


def test_invalid_trajectory_payloads_are_rejected(tmp_path: Path, network_factory) -> None:
    payload = _solved_payload(network_factory)
    payload["trajectories"][0]["points"][0]["t"] = 0  # type: ignore[index]
    with pytest.raises(ArtifactError, match="trajectories/0/points/0/t"):
        write_trajectories(tmp_path / "a.json", payload)

    short = _solved_payload(network_factory)
    short["frames"] = 4
    write_json(tmp_path / "short.json", short)
    with pytest.raises(ArtifactError, match="expected 4"):
        read_trajectories(tmp_path / "short.json")

    (tmp_path / "broken.json").write_text("{", encoding="utf-8")
    with pytest.raises(ArtifactError, match="Invalid JSON"):
        read_trajectories(tmp_path / "broken.json")


def test_model_file_round_trip(tmp_path: Path) -> None:
    model = RbfModel(
        centers=np.array([[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]),
        coefficients=np.array([[0.1, 0.0, -0.1], [0.0, 0.0, 0.25]]),
        support_radius=2.5,
        affine=np.hstack([-0.15 * np.eye(3), np.ones((3, 1))]),
    )
    path = tmp_path / "fields" / "field_002.json"
    write_model(path, model, frame=2)
    assert read_json(path)["frame"] == 2
    loaded = read_model(path)
    np.testing.assert_array_equal(loaded.centers, model.centers)
    np.testing.assert_array_equal(loaded.coefficients, model.coefficients)
    assert loaded.support_radius == 2.5
    np.testing.assert_array_equal(loaded.affine, model.affine)


def test_model_with_wrong_kernel_is_rejected(tmp_path: Path) -> None:
    path = tmp_path / "field.json"
    model = RbfModel(centers=np.eye(3), coefficients=np.zeros((3, 3)), support_radius=1.0)
    payload = model.to_dict()
    payload["kernel"] = "gaussian"
    path.write_text(json.dumps(payload), encoding="utf-8")
    with pytest.raises(ArtifactError, match="kernel"):
        read_model(path)


def test_manifest_lists_artifacts_but_not_itself(tmp_path: Path) -> None:
    (tmp_path / "tracking").mkdir()
    (tmp_path / "tracking" / "metrics.json").write_text("{}", encoding="utf-8")
    (tmp_path / "points.csv").write_text("t,i,x,y,z\n", encoding="utf-8")
    write_manifest(tmp_path)
    manifest = read_json(write_manifest(tmp_path))
    assert manifest["artifact_count"] == 2
    artifacts: list[dict[str, object]] = manifest["artifacts"]  # type: ignore[assignment]
    assert [item["file"] for item in artifacts] == ["points.csv", "tracking/metrics.json"]
    checksums = [str(item["checksum_sha256"]) for item in artifacts]
    assert all(len(checksum) == 64 for checksum in checksums)
