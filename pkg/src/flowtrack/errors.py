from __future__ import annotations


class FlowTrackError(RuntimeError):
    pass


class ConfigError(FlowTrackError):
    pass


class ArtifactError(FlowTrackError):
    pass


class EmptySliceError(FlowTrackError):
    pass


class ImageRequiredError(FlowTrackError):
    pass


class NonPositiveSigmaError(FlowTrackError, ValueError):
    pass


class InvalidConstraintSetError(FlowTrackError, ValueError):
    pass


class NonIntegralSolutionError(FlowTrackError):
    def __init__(self, max_deviation: float) -> None:
        super().__init__(
            f"LP optimum is not integral (max |f - round(f)| = {max_deviation:.3e}); "
            "the constraint matrix is not totally unimodular for this network."
        )
        self.max_deviation = max_deviation


class SolverFailureError(FlowTrackError):
    def __init__(self, message: str, status: int = -1, residuals: dict[str, float] | None = None):
        super().__init__(message)
        self.status = status
        self.residuals = dict(residuals or {})


class BrokenPathError(FlowTrackError):
    pass


class DegenerateSystemError(FlowTrackError):
    pass


class OnAxisError(FlowTrackError, ValueError):
    pass


class UnmatchedTrajectoryError(FlowTrackError):
    pass
