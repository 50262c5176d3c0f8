from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from flowtrack.config import RunConfig, load_config, with_tracking
from flowtrack.doctor import run_doctor
from flowtrack.errors import ArtifactError, ConfigError, FlowTrackError
from flowtrack.models import FEATURE_NAMES, SIGMA_MODES, ConstraintSet
from flowtrack.pipeline import (
    PHANTOMS,
    run_ablate,
    run_densify,
    run_evaluate,
    run_generate,
    run_strain,
    run_sweep,
    run_track,
)


def _constraints(value: str) -> ConstraintSet:
    try:
        return ConstraintSet.parse(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _ball_factor(value: str) -> float:
    number = math.inf if value.strip().lower() == "inf" else float(value)
    if not number > 0:
        raise argparse.ArgumentTypeError(f"ball factor must be positive or 'inf', got {value}")
    return number


def _int_list(value: str) -> list[int]:
    try:
        return [int(item) for item in value.split(",") if item.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value}") from exc


def _float_list(value: str) -> list[float]:
    try:
        return [float(item) for item in value.split(",") if item.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value}") from exc


def _feature_list(value: str) -> list[str]:
    names = [item.strip() for item in value.split(",") if item.strip()]
    unknown = [name for name in names if name not in FEATURE_NAMES]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown feature(s) {unknown}; expected {FEATURE_NAMES}")
    return names


def _add_tracking_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--nk", type=int, default=None, help="Candidates per node.")
    parser.add_argument("--p-th", type=float, default=None, help="Edge weight threshold.")
    parser.add_argument(
        "--constraints",
        type=_constraints,
        default=None,
        help="Comma-separated subset of out,in,bal,loop (example: out,bal,loop).",
    )
    parser.add_argument("--feature", choices=FEATURE_NAMES, default=None)
    parser.add_argument("--sigma-mode", choices=SIGMA_MODES, default=None)
    parser.add_argument("--sigma-x", type=float, default=None)
    parser.add_argument("--sigma-f", type=float, default=None)
    parser.add_argument("--patch-radius", type=int, default=None)
    parser.add_argument(
        "--ball-factor",
        type=_ball_factor,
        default=None,
        help="Spatial candidate ball in units of the sigma_x estimate ('inf' disables it).",
    )


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowtrack",
        description="Periodic point tracking by constrained flow, RBF densification and strain.",
    )
    parser.add_argument(
        "--config",
        type=Path,
        default=Path("flowtrack.toml"),
        help="Path to configuration file (TOML or JSON).",
    )
    parser.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        default="WARNING",
    )
    parser.add_argument("--threads", type=int, default=None, help="Cap for parallel sections.")
    parser.add_argument("--seed", type=int, default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("doctor", help="Check runtime dependencies and the LP backend.")

    generate = sub.add_parser("generate", help="Write a ground-truth phantom session.")
    generate.add_argument("--out", type=Path, required=True, help="Session directory.")
    generate.add_argument("--phantom", choices=PHANTOMS, default="shells")
    generate.add_argument("--frames", type=int, default=16)
    generate.add_argument("--points", type=int, default=5, help="Points per frame (toy1d).")
    generate.add_argument("--z-fr", type=int, default=None)
    generate.add_argument("--theta-fr", type=int, default=None)
    generate.add_argument("--contraction", type=float, default=0.15)
    generate.add_argument("--twist", type=float, default=0.1)
    generate.add_argument("--noise", type=float, default=0.0, help="Jitter on frames 2..T (mm).")
    generate.add_argument("--crossing", action="store_true")
    generate.add_argument("--shuffle", action="store_true")
    generate.add_argument("--voxel-size", type=float, default=2.0)
    generate.add_argument(
        "--volumes",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="Write intensity volumes for the shells phantom.",
    )

    track = sub.add_parser("track", help="Build the flow network, solve and extract trajectories.")
    track.add_argument("--session", type=Path, required=True)
    track.add_argument("--dump-network", action="store_true")
    _add_tracking_flags(track)

    densify = sub.add_parser("densify", help="Fit per-frame RBF displacement fields.")
    densify.add_argument("--session", type=Path, required=True)

    strain = sub.add_parser("strain", help="Compute Lagrangian strain from the dense fields.")
    strain.add_argument("--session", type=Path, required=True)

    evaluate = sub.add_parser("evaluate", help="Score trajectories against ground truth.")
    evaluate.add_argument("--session", type=Path, required=True)

    ablate = sub.add_parser("ablate", help="Compare constraint sets on one network.")
    ablate.add_argument("--session", type=Path, required=True)
    _add_tracking_flags(ablate)

    sweep = sub.add_parser("sweep", help="Tracking error over a grid of tracking parameters.")
    sweep.add_argument("--session", type=Path, required=True)
    sweep.add_argument("--nk", dest="nk_grid", type=_int_list, default=[], help="Example: 1,3,5.")
    sweep.add_argument("--p-th", dest="p_th_grid", type=_float_list, default=[])
    sweep.add_argument("--features", dest="feature_grid", type=_feature_list, default=[])
    sweep.add_argument(
        "--z-fr",
        dest="z_fr_grid",
        type=_int_list,
        default=[],
        help="Longitudinal sampling densities; regenerates the shells phantom per value.",
    )
    sweep.add_argument("--theta-fr", dest="theta_fr_grid", type=_int_list, default=[])
    sweep.add_argument("--constraints", type=_constraints, default=None)
    sweep.add_argument("--patch-radius", type=int, default=None)

    return parser


def _tracking_overrides(args: argparse.Namespace) -> dict[str, object]:
    return {
        "nk": getattr(args, "nk", None),
        "p_th": getattr(args, "p_th", None),
        "constraints": getattr(args, "constraints", None),
        "feature": getattr(args, "feature", None),
        "sigma_mode": getattr(args, "sigma_mode", None),
        "sigma_x": getattr(args, "sigma_x", None),
        "sigma_f": getattr(args, "sigma_f", None),
        "patch_radius": getattr(args, "patch_radius", None),
        "ball_factor": getattr(args, "ball_factor", None),
        "z_fr": getattr(args, "z_fr", None),
        "theta_fr": getattr(args, "theta_fr", None),
    }


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config if args.config and args.config.exists() else None)
    config = with_tracking(config, **_tracking_overrides(args))
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
        config = replace(config, threads=args.threads)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def _session(config: RunConfig, path: Path) -> Path:
    return Path(config.paths.output_root) / path


def _dispatch(args: argparse.Namespace, config: RunConfig) -> int:
    if args.command == "generate":
        summary = run_generate(
            session_dir=_session(config, args.out),
            config=config,
            phantom=args.phantom,
            frames=args.frames,
            points_per_frame=args.points,
            contraction=args.contraction,
            twist=args.twist,
            noise=args.noise,
            crossing=args.crossing,
            shuffle=args.shuffle,
            voxel_size=args.voxel_size,
            with_volumes=args.volumes,
        )
        print(
            f"phantom={summary.phantom} frames={summary.frames} "
            f"points={summary.points_per_frame} volumes={summary.volume_count} "
            f"-> {summary.session_dir}"
        )
        return 0

    session_dir = _session(config, args.session)

    if args.command == "track":
        track = run_track(session_dir=session_dir, config=config, dump_network=args.dump_network)
        print(
            f"trajectories={track.trajectory_count} objective={track.objective:.6g} "
            f"edges={track.edge_count} shared_nodes={track.shared_nodes} "
            f"-> {track.trajectories_path}"
        )
        if track.report is not None:
            print(
                f"overall_median={track.report.overall_median:.4g} "
                f"overall_iqr={track.report.overall_iqr:.4g} metrics={track.metrics_path}"
            )
        return 0

    if args.command == "densify":
        densify = run_densify(session_dir=session_dir, config=config)
        print(
            f"models={densify.model_count} support_radius={densify.support_radius:.4g} "
            f"-> {densify.fields_dir}"
        )
        return 0

    if args.command == "strain":
        strain = run_strain(session_dir=session_dir, config=config)
        print(
            f"samples={strain.sample_count} skipped={strain.skipped} es_frame={strain.es_frame} "
            f"es_radial={strain.es_radial:.4g} es_circumferential={strain.es_circumferential:.4g} "
            f"-> {strain.strain_path}"
        )
        return 0

    if args.command == "evaluate":
        evaluate = run_evaluate(session_dir=session_dir, config=config)
        report = evaluate.report
        print(
            f"overall_median={report.overall_median:.4g} overall_iqr={report.overall_iqr:.4g} "
            f"es_median={report.es_median:.4g} ed_median={report.ed_median:.4g} "
            f"-> {evaluate.metrics_path}"
        )
        return 0

    if args.command == "ablate":
        ablate = run_ablate(session_dir=session_dir, config=config)
        for row in ablate.rows:
            median = "nan" if row.report is None else f"{row.report.overall_median:.4g}"
            print(
                f"constraints={row.constraints.label()} overall_median={median} "
                f"trajectories={row.trajectory_count} untracked={row.untracked} "
                f"shared_nodes={row.shared_nodes}"
            )
        print(f"ablation={ablate.ablation_path}")
        return 0

    if args.command == "sweep":
        sweep = run_sweep(
            session_dir=session_dir,
            config=config,
            nk=args.nk_grid,
            p_th=args.p_th_grid,
            features=args.feature_grid,
            z_fr=args.z_fr_grid,
            theta_fr=args.theta_fr_grid,
        )
        for row in sweep.rows:
            median = "nan" if row.report is None else f"{row.report.overall_median:.4g}"
            setting = " ".join(f"{key}={value}" for key, value in row.setting.items())
            print(
                f"{setting} overall_median={median} trajectories={row.trajectory_count} "
                f"untracked={row.untracked}"
            )
        print(f"sweep={sweep.sweep_path}")
        return 0

    return 2


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )

    if args.command == "doctor":
        checks, healthy = run_doctor()
        for check in checks:
            print(f"{check.name:10} {check.status:5} {check.details}")
        return 0 if healthy else 1

    try:
        config = _resolve_config(args)
        return _dispatch(args, config)
    except (ArtifactError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FlowTrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
