from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
import pytest

from flowtrack.errors import NonPositiveSigmaError
from flowtrack.features import IntensityPatchFeature, PositionFeature
from flowtrack.models import ConstraintSet, FrameSequence, PointId, TrackingConfig
from flowtrack.network import (
    CandidateSet,
    Edge,
    EdgeKind,
    FlowNetwork,
    build_network,
    candidate_pairs,
    compute_sigmas,
    dump_network_csv,
    edge_weight,
    frame_features,
    threshold_edges,
)
from flowtrack.utils import read_csv


class _YFeature:
    """Feature is the y coordinate; lets tests decouple feature and spatial distance."""

    name = "y"

    def extract(self, point: np.ndarray, image=None) -> np.ndarray:
        return np.array([point[1]])

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(abs(a[0] - b[0]))

    def pairwise(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.abs(np.atleast_2d(a)[:, None, 0] - np.atleast_2d(b)[None, :, 0])


def _config(**overrides) -> TrackingConfig:
    values = {"nk": 3, "p_th": 0.0, "feature": "position", "constraints": ConstraintSet()}
    values.update(overrides)
    return TrackingConfig(**values)


def _random_sequence(rng: np.random.Generator, frames: int, points: int) -> FrameSequence:
    return FrameSequence(
        frames=tuple(rng.uniform(0.0, 10.0, size=(points, 3)) for _ in range(frames))
    )


def test_identical_points_weigh_one() -> None:
    x = np.array([1.0, 2.0, 3.0])
    f = np.array([0.3, 0.4])
    assert edge_weight(x, x, f, f, 2.0, 0.5, PositionFeature()) == pytest.approx(1.0)


def test_spatial_distance_of_sigma_root_two_weighs_inverse_e() -> None:
    sigma = 1.7
    xi = np.zeros(3)
    xj = np.array([sigma * math.sqrt(2.0), 0.0, 0.0])
    f = np.zeros(1)
    assert edge_weight(xi, xj, f, f, sigma, 1.0, PositionFeature()) == pytest.approx(math.exp(-1.0))


def test_weight_combines_spatial_and_feature_factors() -> None:
    weight = edge_weight(
        np.zeros(3),
        np.array([1.0, 0.0, 0.0]),
        np.zeros(1),
        np.array([0.5]),
        1.0,
        1.0,
        PositionFeature(),
    )
    assert weight == pytest.approx(0.535261, abs=1e-6)


@pytest.mark.parametrize("sigma_x, sigma_f", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
def test_non_positive_sigma_is_rejected(sigma_x: float, sigma_f: float) -> None:
    with pytest.raises(NonPositiveSigmaError):
        edge_weight(
            np.zeros(3), np.ones(3), np.zeros(1), np.zeros(1), sigma_x, sigma_f, PositionFeature()
        )


def test_weight_decreases_with_distance() -> None:
    f = np.zeros(1)
    weights = [
        edge_weight(np.zeros(3), np.array([d, 0.0, 0.0]), f, f, 1.0, 1.0, PositionFeature())
        for d in (0.0, 0.5, 1.0, 2.0, 4.0)
    ]
    assert weights == sorted(weights, reverse=True)
    assert all(0.0 < w <= 1.0 for w in weights)


def test_weight_uses_the_provider_distance(rng) -> None:
    patch = rng.uniform(0.0, 1.0, size=27)
    x = np.zeros(3)
    intensity = IntensityPatchFeature(patch_radius=1)
    assert edge_weight(x, x, patch, 2.0 * patch + 1.0, 1.0, 0.1, intensity) == pytest.approx(1.0)
    euclidean = edge_weight(x, x, patch, 2.0 * patch + 1.0, 1.0, 0.1, PositionFeature())
    assert euclidean < 1e-6
    inverted = edge_weight(x, x, patch, -patch, 1.0, 1.0, intensity)
    assert inverted == pytest.approx(math.exp(-2.0))


def test_sigma_is_standard_deviation_of_candidate_distances() -> None:
    candidate = CandidateSet(
        source_frame=1,
        target_frame=2,
        tails=np.array([0, 0]),
        heads=np.array([0, 1]),
        euclidean=np.array([1.0, 3.0]),
        feature=np.array([0.0, 0.0]),
    )
    (sigma,) = compute_sigmas([candidate])
    assert sigma.sigma_x == pytest.approx(1.0)
    assert sigma.sigma_f == pytest.approx(1e-9)


def test_equidistant_candidates_fall_back_to_the_floor(caplog) -> None:
    candidate = CandidateSet(1, 2, np.array([0]), np.array([0]), np.array([2.0]), np.array([0.0]))
    with caplog.at_level(logging.WARNING, logger="flowtrack.network"):
        (sigma,) = compute_sigmas([candidate])
    assert sigma.sigma_x == pytest.approx(3e-9)
    assert sigma.sigma_x > 0
    assert "candidate pair" in caplog.text


def test_two_by_two_network_has_four_temporal_edges() -> None:
    sequence = FrameSequence(frames=(np.eye(3)[:2], np.eye(3)[:2] + 0.1))
    network = build_network(sequence, PositionFeature(), _config(nk=2))
    assert len(network.indices_of(EdgeKind.SOURCE)) == 2
    assert len(network.indices_of(EdgeKind.TEMPORAL)) == 4
    assert len(network.indices_of(EdgeKind.LOOP)) == 0


def test_every_non_terminal_node_gets_nk_candidates(rng) -> None:
    sequence = _random_sequence(rng, frames=4, points=6)
    network = build_network(sequence, PositionFeature(), _config(nk=3))
    for node in network.nodes():
        expected = 0 if node.frame == sequence.T else 3
        assert len(network.outgoing(node)) == expected
        assert len(set(network.neighbors(node))) == expected


def test_loop_edges_link_the_last_frame_to_the_first(rng) -> None:
    sequence = _random_sequence(rng, frames=3, points=4)
    config = _config(nk=2, constraints=ConstraintSet(bal=True, loop=True))
    network = build_network(sequence, PositionFeature(), config)
    loops = [network.edges[e] for e in network.indices_of(EdgeKind.LOOP)]
    assert len(loops) == 4 * 2
    assert all(edge.tail.frame == 3 and edge.head.frame == 1 for edge in loops)
    assert network.loop
    assert len(network.sigmas) == 3


def test_equal_feature_ties_fall_back_to_distance_then_index() -> None:
    sequence = FrameSequence(
        frames=(
            np.zeros((1, 3)),
            np.array([[2.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]),
        )
    )
    provider = PositionFeature()
    (candidate,) = candidate_pairs(sequence, frame_features(sequence, provider), provider, nk=2)
    assert candidate.heads.tolist() == [1, 2]
    np.testing.assert_allclose(candidate.euclidean, [1.0, 1.0])


def test_feature_distance_ranks_before_spatial_distance() -> None:
    sequence = FrameSequence(
        frames=(
            np.zeros((1, 3)),
            np.array([[1.0, 5.0, 0.0], [3.0, 0.0, 0.0]]),
        )
    )
    provider = _YFeature()
    (candidate,) = candidate_pairs(
        sequence, frame_features(sequence, provider), provider, nk=1, ball_factor=math.inf
    )
    assert candidate.heads.tolist() == [1]


def test_spatial_ball_excludes_far_feature_matches() -> None:
    sequence = FrameSequence(
        frames=(
            np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
            np.array([[0.1, 3.0, 0.0], [1.1, 3.0, 0.0], [100.0, 0.0, 0.0]]),
        )
    )
    provider = _YFeature()
    features = frame_features(sequence, provider)
    (bounded,) = candidate_pairs(sequence, features, provider, nk=1, ball_factor=3.0)
    (unbounded,) = candidate_pairs(sequence, features, provider, nk=1, ball_factor=math.inf)
    assert 2 not in bounded.heads.tolist()
    assert unbounded.heads.tolist() == [2, 2]


def test_fixed_sigma_mode_uses_configured_widths() -> None:
    sequence = FrameSequence(frames=(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]])))
    config = _config(nk=1, sigma_mode="fixed", sigma_x=1.0, sigma_f=1.0)
    network = build_network(sequence, PositionFeature(), config)
    (temporal,) = network.indices_of(EdgeKind.TEMPORAL)
    assert network.edges[temporal].weight == pytest.approx(math.exp(-0.5))


def test_threshold_keeps_strong_edges_and_every_source_edge(network_factory) -> None:
    network = network_factory([1, 2], {(1, 1, 1): 0.3, (1, 1, 2): 0.6})
    kept = threshold_edges(network, 0.5)
    assert [edge.weight for edge in kept.edges if edge.kind is EdgeKind.TEMPORAL] == [0.6]
    assert len(kept.indices_of(EdgeKind.SOURCE)) == 1
    assert threshold_edges(network, 0.0).edges == network.edges


def test_threshold_outside_unit_interval_is_rejected(network_factory) -> None:
    network = network_factory([1, 1], {(1, 1, 1): 0.3})
    with pytest.raises(ValueError):
        threshold_edges(network, 1.5)


def test_network_build_is_deterministic(rng) -> None:
    sequence = _random_sequence(rng, frames=5, points=7)
    config = _config(constraints=ConstraintSet(bal=True, loop=True))
    first = build_network(sequence, PositionFeature(), config)
    second = build_network(sequence, PositionFeature(), config)
    assert first.edges == second.edges


def test_network_rejects_edges_that_skip_frames(network_factory) -> None:
    sequence = network_factory([1, 1, 1], {}).sequence
    edges = (Edge(EdgeKind.TEMPORAL, PointId(1, 1), PointId(3, 1), 0.5),)
    with pytest.raises(ValueError):
        FlowNetwork(sequence=sequence, edges=edges)


def test_dump_network_csv_writes_one_row_per_edge(tmp_path: Path, network_factory) -> None:
    network = network_factory([1, 2], {(1, 1, 1): 0.3, (1, 1, 2): 0.6})
    path = tmp_path / "network.csv"
    dump_network_csv(path, network)
    rows = read_csv(path, ["kind", "from_t", "from_i", "to_t", "to_i", "weight"])
    assert rows[0] == ["source", "0", "0", "1", "1", "1.0"]
    assert [row[0] for row in rows[1:]] == ["temporal", "temporal"]
    assert float(rows[2][5]) == 0.6
