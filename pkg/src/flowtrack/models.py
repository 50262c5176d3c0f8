from __future__ import annotations

import math
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from flowtrack.errors import ConfigError, InvalidConstraintSetError


@dataclass(frozen=True, slots=True)
class Point3:
    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError(
                f"Point3 coordinates must be finite, got ({self.x}, {self.y}, {self.z})"
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.z]

    @classmethod
    def from_iterable(cls, value: Iterable[float]) -> Point3:
        x, y, z = (float(v) for v in value)
        return cls(x, y, z)


@dataclass(frozen=True, slots=True, order=True)
class PointId:
    frame: int
    index: int

    def to_dict(self) -> dict[str, int]:
        return {"t": self.frame, "i": self.index}

    @classmethod
    def from_dict(cls, value: dict[str, object]) -> PointId:
        return cls(frame=int(value["t"]), index=int(value["i"]))  # type: ignore[arg-type]


@dataclass(frozen=True, slots=True)
class FrameSequence:
    frames: tuple[np.ndarray, ...]
    periodic: bool = False

    def __post_init__(self) -> None:
        converted = []
        for frame in self.frames:
            array = np.array(frame, dtype=np.float64).reshape(-1, 3)
            array.setflags(write=False)
            converted.append(array)
        object.__setattr__(self, "frames", tuple(converted))

    @property
    def T(self) -> int:  # noqa: N802
        return len(self.frames)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(frame) for frame in self.frames)

    def frame(self, t: int) -> np.ndarray:
        return self.frames[t - 1]

    def position(self, pid: PointId) -> np.ndarray:
        return self.frames[pid.frame - 1][pid.index - 1]

    def contains(self, pid: PointId) -> bool:
        return 1 <= pid.frame <= self.T and 1 <= pid.index <= len(self.frames[pid.frame - 1])


@dataclass(frozen=True, slots=True)
class Trajectory:
    points: tuple[PointId, ...]
    loop_closure: PointId | None = None

    def __post_init__(self) -> None:
        for t, pid in enumerate(self.points, start=1):
            if pid.frame != t:
                raise ValueError(f"trajectory entry {t} lies in frame {pid.frame}, expected {t}")
        if self.loop_closure is not None and self.loop_closure.frame != 1:
            raise ValueError(f"loop closure must target frame 1, got {self.loop_closure.frame}")

    @property
    def start(self) -> PointId:
        return self.points[0]

    def to_dict(self) -> dict[str, object]:
        return {
            "points": [pid.to_dict() for pid in self.points],
            "loop_closure": None if self.loop_closure is None else self.loop_closure.to_dict(),
        }

    @classmethod
    def from_dict(cls, value: dict[str, object]) -> Trajectory:
        closure = value.get("loop_closure")
        items: list[dict[str, object]] = value["points"]  # type: ignore[assignment]
        return cls(
            points=tuple(PointId.from_dict(item) for item in items),
            loop_closure=None if closure is None else PointId.from_dict(closure),  # type: ignore
        )


def find_shared_nodes(trajectories: Sequence[Trajectory]) -> dict[PointId, int]:
    counts = Counter(pid for trajectory in trajectories for pid in trajectory.points)
    return {pid: count for pid, count in sorted(counts.items()) if count > 1}


_CONSTRAINT_NAMES = ("out", "in", "bal", "loop")


@dataclass(frozen=True, slots=True)
class ConstraintSet:
    out: bool = True
    inc: bool = False
    bal: bool = False
    loop: bool = False

    def validate(self) -> None:
        if not self.out:
            raise InvalidConstraintSetError("C_out is always enforced; out=False is not allowed.")
        if self.loop and not self.bal:
            raise InvalidConstraintSetError(
                "C_loop requires C_bal (loop balance is meaningless without conservation)."
            )

    def names(self) -> list[str]:
        flags = (self.out, self.inc, self.bal, self.loop)
        return [name for name, enabled in zip(_CONSTRAINT_NAMES, flags, strict=True) if enabled]

    def label(self) -> str:
        return ",".join(self.names())

    @classmethod
    def parse(cls, value: str | Iterable[str]) -> ConstraintSet:
        items = value.split(",") if isinstance(value, str) else list(value)
        names = {item.strip().lower() for item in items if item.strip()}
        unknown = names - set(_CONSTRAINT_NAMES)
        if unknown:
            raise InvalidConstraintSetError(
                f"Unknown constraint(s) {sorted(unknown)}; expected a subset of "
                f"{list(_CONSTRAINT_NAMES)} (example: out,bal,loop)."
            )
        constraints = cls(
            out="out" in names or not names,
            inc="in" in names,
            bal="bal" in names,
            loop="loop" in names,
        )
        constraints.validate()
        return constraints


ABLATION_CONSTRAINTS: tuple[ConstraintSet, ...] = (
    ConstraintSet(),
    ConstraintSet(inc=True),
    ConstraintSet(bal=True),
    ConstraintSet(bal=True, loop=True),
)

SIGMA_MODES = ("per-frame-stddev", "fixed")
FEATURE_NAMES = ("position", "intensity", "gradient")


@dataclass(frozen=True, slots=True)
class TrackingConfig:
    nk: int = 3
    p_th: float = 0.5
    z_fr: int = 40
    theta_fr: int = 30
    constraints: ConstraintSet = field(
        default_factory=lambda: ConstraintSet(bal=True, loop=True)
    )
    sigma_mode: str = "per-frame-stddev"
    sigma_x: float | None = None
    sigma_f: float | None = None
    feature: str = "intensity"
    patch_radius: int = 5
    histogram_bins: int = 8
    gradient_max: float = 1.0
    ball_factor: float = 3.0

    def __post_init__(self) -> None:
        if self.nk < 1:
            raise ConfigError(f"tracking.nk must be >= 1, got {self.nk}")
        if not 0.0 <= self.p_th <= 1.0:
            raise ConfigError(f"tracking.p_th must lie in [0, 1], got {self.p_th}")
        if self.z_fr < 2 or self.theta_fr < 3:
            raise ConfigError(
                f"tracking.z_fr >= 2 and tracking.theta_fr >= 3 required, "
                f"got z_fr={self.z_fr} theta_fr={self.theta_fr}"
            )
        if self.sigma_mode not in SIGMA_MODES:
            raise ConfigError(f"tracking.sigma_mode must be one of {SIGMA_MODES}")
        if self.sigma_mode == "fixed" and (
            self.sigma_x is None or self.sigma_f is None or self.sigma_x <= 0 or self.sigma_f <= 0
        ):
            raise ConfigError("sigma_mode 'fixed' needs positive tracking.sigma_x and sigma_f")
        if self.feature not in FEATURE_NAMES:
            raise ConfigError(f"tracking.feature must be one of {FEATURE_NAMES}")
        if self.patch_radius < 0 or self.histogram_bins < 2 or self.gradient_max <= 0:
            raise ConfigError("patch_radius >= 0, histogram_bins >= 2, gradient_max > 0 required")
        if not self.ball_factor > 0:
            raise ConfigError(f"tracking.ball_factor must be positive, got {self.ball_factor}")
        try:
            self.constraints.validate()
        except InvalidConstraintSetError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict[str, object]:
        payload = asdict(self)
        payload["constraints"] = self.constraints.names()
        payload["ball_factor"] = _encode_float(self.ball_factor)
        return {key: value for key, value in payload.items() if value is not None}

    @classmethod
    def from_dict(cls, value: dict[str, object]) -> TrackingConfig:
        kwargs = dict(value)
        if "constraints" in kwargs:
            kwargs["constraints"] = ConstraintSet.parse(kwargs["constraints"])  # type: ignore
        if "ball_factor" in kwargs:
            kwargs["ball_factor"] = _decode_float(kwargs["ball_factor"])
        return cls(**kwargs)  # type: ignore[arg-type]


def _encode_float(value: float) -> float | str:
    return "inf" if math.isinf(value) else value


def _decode_float(value: object) -> float:
    return math.inf if value == "inf" else float(value)  # type: ignore[arg-type]


@dataclass(frozen=True, slots=True)
class SequenceViolation:
    kind: str
    message: str
    frame: int | None = None
    point: PointId | None = None


def validate_sequence(sequence: FrameSequence) -> list[SequenceViolation]:
    violations: list[SequenceViolation] = []
    if sequence.T < 2:
        violations.append(
            SequenceViolation("too_few_frames", f"sequence has {sequence.T} frame(s), need >= 2")
        )
    for t, frame in enumerate(sequence.frames, start=1):
        if len(frame) == 0:
            violations.append(SequenceViolation("empty_frame", f"frame {t} is empty", frame=t))
            continue
        bad_rows = np.flatnonzero(~np.isfinite(frame).all(axis=1))
        for row in bad_rows:
            pid = PointId(t, int(row) + 1)
            violations.append(
                SequenceViolation(
                    "non_finite",
                    f"point (t={pid.frame}, i={pid.index}) has a non-finite coordinate",
                    frame=t,
                    point=pid,
                )
            )
    return violations
