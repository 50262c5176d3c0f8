from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from jsonschema import ValidationError, validate

from flowtrack.dense_field import RegularizationWeights
from flowtrack.errors import ConfigError, FlowTrackError
from flowtrack.models import Point3, TrackingConfig
from flowtrack.sampling import CylindricalSamplingSpec
from flowtrack.strain import LvAxes
from flowtrack.utils import write_json

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib  # type: ignore[no-redef]


@dataclass(frozen=True, slots=True)
class PathConfig:
    output_root: str = "."


@dataclass(frozen=True, slots=True)
class RunConfig:
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    regularization: RegularizationWeights = field(default_factory=RegularizationWeights)
    sampling: CylindricalSamplingSpec = field(default_factory=CylindricalSamplingSpec)
    axes: LvAxes = field(default_factory=LvAxes)
    seed: int = 7
    threads: int = 1
    paths: PathConfig = field(default_factory=PathConfig)

    def to_dict(self) -> dict[str, object]:
        return {
            "seed": self.seed,
            "threads": self.threads,
            "tracking": self.tracking.to_dict(),
            "regularization": self.regularization.to_dict(),
            "sampling": {
                "long_axis": list(self.sampling.long_axis),
                "axis_origin": self.sampling.axis_origin.to_list(),
            },
            "axes": self.axes.to_dict(),
            "paths": {"output_root": self.paths.output_root},
        }


def _load_schema() -> dict[str, object]:
    schema_path = Path(__file__).parent / "schemas" / "run_config.v1.schema.json"
    return json.loads(schema_path.read_text(encoding="utf-8"))


def _section(raw: dict[str, object], key: str) -> dict[str, object]:
    section = raw.get(key, {})
    return section if isinstance(section, dict) else {}


def run_config_from_dict(raw: dict[str, object]) -> RunConfig:
    try:
        validate(instance=raw, schema=_load_schema())
    except ValidationError as exc:
        location = ".".join(str(part) for part in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid configuration at {location}: {exc.message}") from exc

    try:
        tracking = TrackingConfig.from_dict(_section(raw, "tracking"))
        regularization = RegularizationWeights(**_section(raw, "regularization"))  # type: ignore
        sampling_raw = _section(raw, "sampling")
        origin = sampling_raw.get("axis_origin", (0.0, 0.0, 0.0))
        sampling = CylindricalSamplingSpec(
            z_fr=tracking.z_fr,
            theta_fr=tracking.theta_fr,
            long_axis=tuple(sampling_raw.get("long_axis", (0.0, 0.0, 1.0))),  # type: ignore
            axis_origin=Point3.from_iterable(origin),  # type: ignore[arg-type]
        )
        axes = LvAxes.from_dict(_section(raw, "axes"))
    except (ValueError, FlowTrackError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {exc}") from exc

    paths = PathConfig(**_section(raw, "paths"))  # type: ignore[arg-type]
    return RunConfig(
        tracking=tracking,
        regularization=regularization,
        sampling=sampling,
        axes=axes,
        seed=int(raw.get("seed", 7)),  # type: ignore[arg-type]
        threads=int(raw.get("threads", 1)),  # type: ignore[arg-type]
        paths=paths,
    )


def load_config(path: Path | None) -> RunConfig:
    if path is None or not path.exists():
        return RunConfig()
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text) if path.suffix.lower() == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse configuration {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"configuration {path} must hold a table/object at the top level")
    return run_config_from_dict(raw)


def dump_config(path: Path, config: RunConfig) -> None:
    write_json(path, config.to_dict())


def with_tracking(config: RunConfig, **overrides: object) -> RunConfig:
    given = {key: value for key, value in overrides.items() if value is not None}
    if not given:
        return config
    try:
        tracking = replace(config.tracking, **given)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    sampling = replace(config.sampling, z_fr=tracking.z_fr, theta_fr=tracking.theta_fr)
    return replace(config, tracking=tracking, sampling=sampling)
