"""Exception types shared across the package."""


class GeoGuideError(Exception):
    """Base class for all package errors."""


class DimensionError(GeoGuideError, ValueError):
    pass


class StateError(GeoGuideError, RuntimeError):
    pass


class GeometryError(GeoGuideError, ValueError):
    pass


class ConfigError(GeoGuideError, ValueError):
    pass


class SpecError(ConfigError):
    pass


class TrainingDiverged(GeoGuideError, RuntimeError):
    """Raised when a loss turns non-finite during training."""

    def __init__(self, step, last_report=None):
        self.step = step
        self.last_report = last_report
        super().__init__(f"loss became non-finite at step {step}; last finite report: {last_report}")
