from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np

from flowtrack.config import RunConfig
from flowtrack.dense_field import RbfModel, fit_displacement_fields, trajectory_positions
from flowtrack.errors import ArtifactError, DegenerateSystemError
from flowtrack.evaluation import (
    AblationRow,
    SweepRow,
    TrackingErrorReport,
    constraint_ablation,
    sweep_settings,
    tracking_error,
    tracking_sweep,
    write_ablation_csv,
    write_sweep_csv,
)
from flowtrack.exporter import (
    read_model,
    read_trajectories,
    solution_to_dict,
    write_manifest,
    write_model,
    write_trajectories,
)
from flowtrack.features import FeatureProvider, make_provider
from flowtrack.models import FrameSequence, Trajectory, find_shared_nodes, validate_sequence
from flowtrack.network import build_network, dump_network_csv, threshold_edges
from flowtrack.phantoms import (
    GroundTruth,
    ShellGeometry,
    ShellPhantom,
    gen_cyclic_shells,
    gen_toy_1d,
)
from flowtrack.pointsets import (
    read_ground_truth_csv,
    read_points_csv,
    read_sequence_meta,
    write_ground_truth_csv,
    write_points_csv,
    write_sequence_meta,
)
from flowtrack.solver import extract_trajectories, solve_flow
from flowtrack.strain import (
    segment_curves,
    segment_labels,
    strain_field,
    write_segments_csv,
    write_strain_csv,
)
from flowtrack.utils import ensure_dir, write_json
from flowtrack.volumes import VolumeImage, read_volume, write_volume

logger = logging.getLogger(__name__)

PHANTOMS = ("shells", "toy1d")


@dataclass(slots=True)
class SessionInputs:
    sequence: FrameSequence
    ground_truth: GroundTruth | None
    volumes: list[VolumeImage] | None
    meta: dict[str, object]


def _volume_path(session_dir: Path, t: int) -> Path:
    return session_dir / "volumes" / f"frame_{t:03d}.vol"


def _field_path(session_dir: Path, t: int) -> Path:
    return session_dir / "fields" / f"frame_{t:03d}.json"


def load_session(session_dir: Path) -> SessionInputs:
    if not session_dir.is_dir():
        raise ArtifactError(f"Session directory not found: {session_dir}")
    meta = read_sequence_meta(session_dir)
    sequence = read_points_csv(session_dir / "points.csv", periodic=bool(meta.get("periodic")))
    violations = validate_sequence(sequence)
    if violations:
        raise ArtifactError(
            f"{session_dir / 'points.csv'} is not a valid sequence: "
            + "; ".join(v.message for v in violations)
        )
    es_frame = int(meta.get("es_frame", sequence.T // 2 + 1))  # type: ignore[arg-type]
    truth_path = session_dir / "ground_truth.csv"
    ground_truth = read_ground_truth_csv(truth_path, es_frame) if truth_path.exists() else None
    volumes = None
    if (session_dir / "volumes").is_dir():
        volumes = [read_volume(_volume_path(session_dir, t)) for t in range(1, sequence.T + 1)]
    return SessionInputs(sequence, ground_truth, volumes, meta)


def _provider(config: RunConfig) -> FeatureProvider:
    tracking = config.tracking
    return make_provider(
        tracking.feature,
        patch_radius=tracking.patch_radius,
        bins=tracking.histogram_bins,
        max_magnitude=tracking.gradient_max,
    )


@dataclass(slots=True)
class GenerateSummary:
    session_dir: Path
    phantom: str
    frames: int
    points_per_frame: int
    volume_count: int


def run_generate(
    *,
    session_dir: Path,
    config: RunConfig,
    phantom: str = "shells",
    frames: int = 16,
    points_per_frame: int = 5,
    contraction: float = 0.15,
    twist: float = 0.1,
    noise: float = 0.0,
    crossing: bool = False,
    shuffle: bool = False,
    voxel_size: float = 2.0,
    with_volumes: bool = True,
) -> GenerateSummary:
    if phantom not in PHANTOMS:
        raise ValueError(f"Unknown phantom '{phantom}' (expected one of {PHANTOMS})")
    ensure_dir(session_dir)
    volumes: tuple[VolumeImage, ...] = ()
    if phantom == "toy1d":
        sequence, ground_truth = gen_toy_1d(
            points_per_frame,
            frames,
            noise=noise,
            crossing=crossing,
            shuffle=shuffle,
            seed=config.seed,
        )
        parameters: dict[str, object] = {"noise": noise, "crossing": crossing, "shuffle": shuffle}
    else:
        shells = gen_cyclic_shells(
            config.tracking.z_fr,
            config.tracking.theta_fr,
            frames,
            contraction,
            twist,
            config.seed,
            noise=noise,
            shuffle=shuffle,
            with_volumes=with_volumes,
            voxel_size=voxel_size,
        )
        sequence, ground_truth, volumes = shells.sequence, shells.ground_truth, shells.volumes
        parameters = {
            **shells.parameters(),
            "z_fr": config.tracking.z_fr,
            "theta_fr": config.tracking.theta_fr,
            "noise": noise,
            "shuffle": shuffle,
            "voxel_size": voxel_size,
        }

    write_sequence_meta(
        session_dir / "meta" / "sequence.json",
        phantom=phantom,
        sequence=sequence,
        es_frame=ground_truth.es_frame,
        seed=config.seed,
        parameters=parameters,
    )
    write_points_csv(session_dir / "points.csv", sequence)
    write_ground_truth_csv(session_dir / "ground_truth.csv", ground_truth)
    for t, volume in enumerate(volumes, start=1):
        write_volume(_volume_path(session_dir, t), volume)
    write_manifest(session_dir)
    return GenerateSummary(
        session_dir=session_dir,
        phantom=phantom,
        frames=sequence.T,
        points_per_frame=sequence.sizes[0],
        volume_count=len(volumes),
    )


@dataclass(slots=True)
class TrackSummary:
    trajectories_path: Path
    trajectory_count: int
    objective: float
    edge_count: int
    shared_nodes: int
    metrics_path: Path | None
    report: TrackingErrorReport | None


def _write_metrics(
    session_dir: Path, report: TrackingErrorReport, config: RunConfig, es_frame: int
) -> Path:
    path = session_dir / "evaluation" / "metrics.json"
    write_json(
        path,
        {
            "schema_version": "v1",
            "constraints": config.tracking.constraints.names(),
            "es_frame": es_frame,
            **report.to_dict(),
        },
    )
    return path


def run_track(*, session_dir: Path, config: RunConfig, dump_network: bool = False) -> TrackSummary:
    inputs = load_session(session_dir)
    tracking = config.tracking
    network = build_network(inputs.sequence, _provider(config), tracking, images=inputs.volumes)
    network = threshold_edges(network, tracking.p_th)
    if dump_network:
        dump_network_csv(session_dir / "tracking" / "network.csv", network)

    solution = solve_flow(network, tracking.constraints)
    trajectories = extract_trajectories(solution, network)
    shared = len(find_shared_nodes(trajectories))
    if not trajectories:
        logger.warning(
            "no trajectories survived (p_th=%s, constraints=%s)",
            tracking.p_th,
            tracking.constraints.label(),
        )
    trajectories_path = session_dir / "tracking" / "trajectories.json"
    write_trajectories(
        trajectories_path,
        solution_to_dict(
            trajectories,
            solution,
            frames=inputs.sequence.T,
            extra={
                "edge_count": len(network.edges),
                "shared_nodes": shared,
                "tracking": tracking.to_dict(),
            },
        ),
    )

    report = None
    metrics_path = None
    if inputs.ground_truth is not None and trajectories:
        report = tracking_error(trajectories, inputs.sequence, inputs.ground_truth)
        metrics_path = _write_metrics(session_dir, report, config, inputs.ground_truth.es_frame)
    write_manifest(session_dir)
    return TrackSummary(
        trajectories_path=trajectories_path,
        trajectory_count=len(trajectories),
        objective=solution.objective,
        edge_count=len(network.edges),
        shared_nodes=shared,
        metrics_path=metrics_path,
        report=report,
    )


def _load_trajectories(session_dir: Path) -> list[Trajectory]:
    path = session_dir / "tracking" / "trajectories.json"
    if not path.exists():
        raise ArtifactError(f"Trajectory file not found: {path} (run 'flowtrack track' first)")
    trajectories, _ = read_trajectories(path)
    return trajectories


@dataclass(slots=True)
class DensifySummary:
    fields_dir: Path
    model_count: int
    support_radius: float


def _densify(session_dir: Path, config: RunConfig, inputs: SessionInputs) -> list[RbfModel]:
    trajectories = _load_trajectories(session_dir)
    models = fit_displacement_fields(
        inputs.sequence, trajectories, config.regularization, threads=config.threads
    )
    for t, model in enumerate(models, start=1):
        write_model(_field_path(session_dir, t), model, frame=t)
    return models


def run_densify(*, session_dir: Path, config: RunConfig) -> DensifySummary:
    inputs = load_session(session_dir)
    models = _densify(session_dir, config, inputs)
    write_manifest(session_dir)
    return DensifySummary(
        fields_dir=session_dir / "fields",
        model_count=len(models),
        support_radius=models[0].support_radius,
    )


@dataclass(slots=True)
class StrainSummary:
    strain_path: Path
    segments_path: Path
    sample_count: int
    skipped: int
    es_frame: int
    es_radial: float
    es_circumferential: float


def run_strain(*, session_dir: Path, config: RunConfig) -> StrainSummary:
    inputs = load_session(session_dir)
    trajectories = _load_trajectories(session_dir)
    field_paths = [_field_path(session_dir, t) for t in range(1, inputs.sequence.T + 1)]
    if all(path.exists() for path in field_paths):
        models = [read_model(path) for path in field_paths]
    else:
        models = _densify(session_dir, config, inputs)

    reference = trajectory_positions(inputs.sequence, trajectories)[0]
    frames = []
    skipped: list[int] = []
    for model in models:
        samples, skipped = strain_field(model, config.axes, reference)
        frames.append(samples)
    kept = np.delete(reference, skipped, axis=0)
    if len(kept) == 0:
        raise DegenerateSystemError(
            f"every one of the {len(reference)} reference points lies on the long axis "
            f"{list(config.axes.long_axis)}; no strain samples remain"
        )
    labels = segment_labels(config.axes, kept)

    strain_path = session_dir / "strain" / "strain.csv"
    segments_path = session_dir / "strain" / "segments.csv"
    write_strain_csv(strain_path, frames)
    write_segments_csv(segments_path, segment_curves(frames, labels))
    write_manifest(session_dir)

    default_es = inputs.sequence.T // 2 + 1
    es_frame = int(inputs.meta.get("es_frame", default_es))  # type: ignore[arg-type]
    es_samples = frames[es_frame - 1]
    return StrainSummary(
        strain_path=strain_path,
        segments_path=segments_path,
        sample_count=len(kept),
        skipped=len(skipped),
        es_frame=es_frame,
        es_radial=float(np.median([s.radial for s in es_samples])) if es_samples else 0.0,
        es_circumferential=(
            float(np.median([s.circumferential for s in es_samples])) if es_samples else 0.0
        ),
    )


@dataclass(slots=True)
class EvaluateSummary:
    metrics_path: Path
    report: TrackingErrorReport


def run_evaluate(*, session_dir: Path, config: RunConfig) -> EvaluateSummary:
    inputs = load_session(session_dir)
    if inputs.ground_truth is None:
        raise ArtifactError(f"Ground truth not found: {session_dir / 'ground_truth.csv'}")
    trajectories = _load_trajectories(session_dir)
    report = tracking_error(trajectories, inputs.sequence, inputs.ground_truth)
    metrics_path = _write_metrics(session_dir, report, config, inputs.ground_truth.es_frame)
    write_manifest(session_dir)
    return EvaluateSummary(metrics_path=metrics_path, report=report)


@dataclass(slots=True)
class AblateSummary:
    ablation_path: Path
    rows: list[AblationRow]


def run_ablate(*, session_dir: Path, config: RunConfig) -> AblateSummary:
    inputs = load_session(session_dir)
    if inputs.ground_truth is None:
        raise ArtifactError(f"Ground truth not found: {session_dir / 'ground_truth.csv'}")
    rows = constraint_ablation(
        inputs.sequence,
        inputs.ground_truth,
        config.tracking,
        _provider(config),
        images=inputs.volumes,
        threads=config.threads,
    )
    path = session_dir / "ablation" / "ablation.csv"
    write_ablation_csv(path, rows)
    write_manifest(session_dir)
    return AblateSummary(ablation_path=path, rows=rows)


GEOMETRY_KEYS = ("endo_radius", "endo_height", "epi_radius", "epi_height", "truncation")


def _phantom_parameters(inputs: SessionInputs) -> dict[str, Any]:
    parameters = inputs.meta.get("parameters", {})
    return dict(parameters) if isinstance(parameters, dict) else {}


def _regenerate_shells(
    inputs: SessionInputs, density: dict[str, Any], *, with_volumes: bool
) -> ShellPhantom:
    parameters = _phantom_parameters(inputs)
    geometry = ShellGeometry(
        **{key: float(parameters[key]) for key in GEOMETRY_KEYS if key in parameters}
    )
    return gen_cyclic_shells(
        int(density["z_fr"]),
        int(density["theta_fr"]),
        inputs.sequence.T,
        float(parameters.get("contraction", 0.15)),
        float(parameters.get("twist", 0.1)),
        int(inputs.meta.get("seed", 0)),  # type: ignore[call-overload]
        noise=float(parameters.get("noise", 0.0)),
        shuffle=bool(parameters.get("shuffle", False)),
        with_volumes=with_volumes,
        voxel_size=float(parameters.get("voxel_size", 2.0)),
        geometry=geometry,
    )


@dataclass(slots=True)
class SweepSummary:
    sweep_path: Path
    rows: list[SweepRow]


def run_sweep(
    *,
    session_dir: Path,
    config: RunConfig,
    nk: Sequence[int] = (),
    p_th: Sequence[float] = (),
    features: Sequence[str] = (),
    z_fr: Sequence[int] = (),
    theta_fr: Sequence[int] = (),
) -> SweepSummary:
    """Tracking error over a parameter grid.

    Sampling densities (z_fr, theta_fr) regenerate the session's shells phantom with its stored
    motion, noise and seed; the other settings re-track the stored sequence.
    """
    inputs = load_session(session_dir)
    if inputs.ground_truth is None:
        raise ArtifactError(f"Ground truth not found: {session_dir / 'ground_truth.csv'}")
    settings = sweep_settings(nk=nk, p_th=p_th, feature=features) or [{}]
    if not z_fr and not theta_fr:
        rows = tracking_sweep(
            inputs.sequence,
            inputs.ground_truth,
            config.tracking,
            settings,
            images=inputs.volumes,
            threads=config.threads,
        )
    else:
        if inputs.meta.get("phantom") != "shells":
            raise ArtifactError(
                f"sampling-density sweeps regenerate the shells phantom, but {session_dir} "
                f"holds phantom '{inputs.meta.get('phantom')}'"
            )
        parameters = _phantom_parameters(inputs)
        densities = sweep_settings(
            z_fr=list(z_fr) or [int(parameters.get("z_fr", config.tracking.z_fr))],
            theta_fr=list(theta_fr) or [int(parameters.get("theta_fr", config.tracking.theta_fr))],
        )
        with_volumes = any(
            setting.get("feature", config.tracking.feature) != "position" for setting in settings
        )
        rows = []
        for density in densities:
            shells = _regenerate_shells(inputs, density, with_volumes=with_volumes)
            logger.info(
                "sweep density z_fr=%s theta_fr=%s: %d points per frame",
                density["z_fr"],
                density["theta_fr"],
                shells.sequence.sizes[0],
            )
            rows.extend(
                replace(row, setting={**density, **row.setting})
                for row in tracking_sweep(
                    shells.sequence,
                    shells.ground_truth,
                    replace(config.tracking, **density),
                    settings,
                    images=shells.volumes or None,
                    threads=config.threads,
                )
            )
    path = session_dir / "sweep" / "sweep.csv"
    write_sweep_csv(path, rows)
    write_manifest(session_dir)
    return SweepSummary(sweep_path=path, rows=rows)
