from __future__ import annotations

import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from flowtrack.errors import NonPositiveSigmaError
from flowtrack.features import FeatureProvider, extract_frame
from flowtrack.models import FrameSequence, PointId, TrackingConfig
from flowtrack.utils import write_csv
from flowtrack.volumes import VolumeImage

logger = logging.getLogger(__name__)

_TINY = np.finfo(np.float64).tiny


class EdgeKind(str, Enum):
    SOURCE = "source"
    TEMPORAL = "temporal"
    LOOP = "loop"


@dataclass(frozen=True, slots=True)
class Edge:
    kind: EdgeKind
    tail: PointId | None  # None is the source node x_src
    head: PointId
    weight: float


@dataclass(frozen=True, slots=True)
class TransitionSigma:
    sigma_x: float
    sigma_f: float


@dataclass(frozen=True, slots=True)
class CandidateSet:
    """Candidate pairs for one transition, 0-based indices into the two frames."""

    source_frame: int
    target_frame: int
    tails: np.ndarray
    heads: np.ndarray
    euclidean: np.ndarray
    feature: np.ndarray

    def __len__(self) -> int:
        return len(self.tails)


@dataclass(frozen=True, slots=True)
class FlowNetwork:
    sequence: FrameSequence
    edges: tuple[Edge, ...]
    sigmas: tuple[TransitionSigma, ...] = ()
    loop: bool = False
    _out: dict[PointId, tuple[int, ...]] = field(init=False, repr=False, compare=False)
    _in: dict[PointId, tuple[int, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        out: dict[PointId, list[int]] = {}
        inc: dict[PointId, list[int]] = {}
        for index, edge in enumerate(self.edges):
            if edge.kind is EdgeKind.TEMPORAL and edge.tail is not None:
                if edge.head.frame != edge.tail.frame + 1:
                    raise ValueError(f"temporal edge {edge.tail} -> {edge.head} skips frames")
            if edge.kind is EdgeKind.LOOP and edge.tail is not None:
                if edge.tail.frame != self.sequence.T or edge.head.frame != 1:
                    raise ValueError(f"loop edge {edge.tail} -> {edge.head} must run T -> 1")
            if edge.kind is EdgeKind.SOURCE and edge.head.frame != 1:
                raise ValueError(f"source edge must enter frame 1, got {edge.head}")
            if edge.tail is not None:
                out.setdefault(edge.tail, []).append(index)
            inc.setdefault(edge.head, []).append(index)
        object.__setattr__(self, "_out", {key: tuple(value) for key, value in out.items()})
        object.__setattr__(self, "_in", {key: tuple(value) for key, value in inc.items()})

    def nodes(self) -> Iterator[PointId]:
        for t, size in enumerate(self.sequence.sizes, start=1):
            for i in range(1, size + 1):
                yield PointId(t, i)

    def outgoing(self, node: PointId) -> tuple[int, ...]:
        return self._out.get(node, ())

    def incoming(self, node: PointId, *, include_source: bool = False) -> tuple[int, ...]:
        edges = self._in.get(node, ())
        if include_source:
            return edges
        return tuple(e for e in edges if self.edges[e].kind is not EdgeKind.SOURCE)

    def source_edge(self, node: PointId) -> int | None:
        for e in self._in.get(node, ()):
            if self.edges[e].kind is EdgeKind.SOURCE:
                return e
        return None

    def neighbors(self, node: PointId) -> tuple[PointId, ...]:
        return tuple(self.edges[e].head for e in self.outgoing(node))

    def indices_of(self, kind: EdgeKind) -> np.ndarray:
        return np.array([i for i, edge in enumerate(self.edges) if edge.kind is kind], dtype=int)

    @property
    def weights(self) -> np.ndarray:
        return np.array([edge.weight for edge in self.edges], dtype=np.float64)


def edge_weight(
    xi: np.ndarray,
    xj: np.ndarray,
    fi: np.ndarray,
    fj: np.ndarray,
    sigma_x: float,
    sigma_f: float,
    provider: FeatureProvider,
) -> float:
    if not (sigma_x > 0 and sigma_f > 0):
        raise NonPositiveSigmaError(
            f"sigmas must be strictly positive, got sigma_x={sigma_x} sigma_f={sigma_f}"
        )
    spatial = float(np.linalg.norm(np.asarray(xi) - np.asarray(xj)))
    feature = float(provider.distance(np.asarray(fi), np.asarray(fj)))
    return _weight(spatial, feature, sigma_x, sigma_f)


def _weight(spatial, feature, sigma_x: float, sigma_f: float):
    value = np.exp(-np.square(spatial) / (2.0 * sigma_x**2)) * np.exp(
        -np.square(feature) / (2.0 * sigma_f**2)
    )
    return np.maximum(value, _TINY)


def _transition_candidates(
    source_points: np.ndarray,
    target_points: np.ndarray,
    source_features: np.ndarray,
    target_features: np.ndarray,
    provider: FeatureProvider,
    nk: int,
    ball_factor: float,
    source_frame: int,
    target_frame: int,
) -> CandidateSet:
    tree = cKDTree(target_points)
    k = min(nk, len(target_points))
    kth, _ = tree.query(source_points, k=k)
    kth = np.asarray(kth).reshape(len(source_points), -1)[:, -1]
    sigma_estimate = float(np.sqrt(np.mean(kth**2))) if len(kth) else 0.0
    all_targets = np.arange(len(target_points))

    tails: list[np.ndarray] = []
    heads: list[np.ndarray] = []
    euclid: list[np.ndarray] = []
    feats: list[np.ndarray] = []
    for i, point in enumerate(source_points):
        if math.isinf(ball_factor):
            ball = all_targets
        else:
            radius = max(ball_factor * sigma_estimate, float(kth[i]))
            ball = np.array(sorted(tree.query_ball_point(point, radius * (1.0 + 1e-12) + 1e-12)))
        eu = np.linalg.norm(target_points[ball] - point, axis=1)
        fd = provider.pairwise(source_features[i : i + 1], target_features[ball])[0]
        order = np.lexsort((ball, eu, fd))[:nk]
        tails.append(np.full(len(order), i))
        heads.append(ball[order])
        euclid.append(eu[order])
        feats.append(fd[order])
    return CandidateSet(
        source_frame=source_frame,
        target_frame=target_frame,
        tails=np.concatenate(tails) if tails else np.empty(0, dtype=int),
        heads=np.concatenate(heads) if heads else np.empty(0, dtype=int),
        euclidean=np.concatenate(euclid) if euclid else np.empty(0),
        feature=np.concatenate(feats) if feats else np.empty(0),
    )


def candidate_pairs(
    sequence: FrameSequence,
    frame_features: Sequence[np.ndarray],
    provider: FeatureProvider,
    nk: int,
    *,
    ball_factor: float = 3.0,
    loop: bool = False,
) -> list[CandidateSet]:
    """Feature k-NN candidates inside a spatial ball, one set per transition.

    Ties in feature distance fall back to Euclidean distance, then to the smaller target index.
    With ``loop`` the last set links frame T back to frame 1.
    """
    transitions = [(t, t + 1) for t in range(1, sequence.T)]
    if loop:
        transitions.append((sequence.T, 1))
    candidates = []
    for a, b in transitions:
        candidates.append(
            _transition_candidates(
                sequence.frame(a),
                sequence.frame(b),
                frame_features[a - 1],
                frame_features[b - 1],
                provider,
                nk,
                ball_factor,
                a,
                b,
            )
        )
    return candidates


def compute_sigmas(candidates: Sequence[CandidateSet]) -> list[TransitionSigma]:
    sigmas = []
    for candidate in candidates:
        if len(candidate) < 2:
            logger.warning(
                "transition %d->%d has %d candidate pair(s); sigma falls back to its floor",
                candidate.source_frame,
                candidate.target_frame,
                len(candidate),
            )
        sigmas.append(
            TransitionSigma(
                sigma_x=_floored_std(candidate.euclidean),
                sigma_f=_floored_std(candidate.feature),
            )
        )
    return sigmas


def _floored_std(values: np.ndarray) -> float:
    if len(values) == 0:
        return 1e-9
    sigma = float(np.std(values))
    floor = 1e-9 * (1.0 + float(np.mean(values)))
    return max(sigma, floor)


def frame_features(
    sequence: FrameSequence,
    provider: FeatureProvider,
    images: Sequence[VolumeImage | None] | None = None,
) -> list[np.ndarray]:
    features = []
    for t in range(1, sequence.T + 1):
        image = images[t - 1] if images is not None else None
        features.append(extract_frame(provider, sequence.frame(t), image))
    return features


def build_network(
    sequence: FrameSequence,
    provider: FeatureProvider,
    config: TrackingConfig,
    *,
    images: Sequence[VolumeImage | None] | None = None,
    loop_edges: bool | None = None,
) -> FlowNetwork:
    loop = config.constraints.loop if loop_edges is None else loop_edges
    features = frame_features(sequence, provider, images)
    candidates = candidate_pairs(
        sequence, features, provider, config.nk, ball_factor=config.ball_factor, loop=loop
    )
    if config.sigma_mode == "fixed":
        sigmas = [
            TransitionSigma(float(config.sigma_x), float(config.sigma_f))  # type: ignore[arg-type]
            for _ in candidates
        ]
    else:
        sigmas = compute_sigmas(candidates)

    edges: list[Edge] = [
        Edge(EdgeKind.SOURCE, None, PointId(1, i + 1), 1.0) for i in range(len(sequence.frame(1)))
    ]
    for candidate, sigma in zip(candidates, sigmas, strict=True):
        kind = EdgeKind.LOOP if candidate.target_frame == 1 else EdgeKind.TEMPORAL
        weights = _weight(candidate.euclidean, candidate.feature, sigma.sigma_x, sigma.sigma_f)
        for tail, head, weight in zip(candidate.tails, candidate.heads, weights, strict=True):
            edges.append(
                Edge(
                    kind,
                    PointId(candidate.source_frame, int(tail) + 1),
                    PointId(candidate.target_frame, int(head) + 1),
                    float(weight),
                )
            )
        logger.debug(
            "transition %d->%d: %d candidates sigma_x=%.4g sigma_f=%.4g",
            candidate.source_frame,
            candidate.target_frame,
            len(candidate),
            sigma.sigma_x,
            sigma.sigma_f,
        )
    return FlowNetwork(sequence=sequence, edges=tuple(edges), sigmas=tuple(sigmas), loop=loop)


def threshold_edges(network: FlowNetwork, p_th: float) -> FlowNetwork:
    """Drop temporal and loop edges weighted below p_th; source edges are kept."""
    if not 0.0 <= p_th <= 1.0:
        raise ValueError(f"p_th must lie in [0, 1], got {p_th}")
    kept = tuple(
        edge for edge in network.edges if edge.kind is EdgeKind.SOURCE or edge.weight >= p_th
    )
    logger.debug("threshold %.3g kept %d of %d edges", p_th, len(kept), len(network.edges))
    return FlowNetwork(
        sequence=network.sequence, edges=kept, sigmas=network.sigmas, loop=network.loop
    )


def dump_network_csv(path: Path, network: FlowNetwork) -> None:
    rows = []
    for edge in network.edges:
        from_t, from_i = (0, 0) if edge.tail is None else (edge.tail.frame, edge.tail.index)
        rows.append(
            [edge.kind.value, from_t, from_i, edge.head.frame, edge.head.index, edge.weight]
        )
    write_csv(path, ["kind", "from_t", "from_i", "to_t", "to_i", "weight"], rows)
