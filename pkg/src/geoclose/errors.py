"""Exception hierarchy shared across the package."""


class GeocloseError(Exception):
    """Base class for every error raised by geoclose."""


class MetricDegeneracyError(GeocloseError):
    def __init__(self, x, detail=""):
        self.x = x
        super().__init__(f"metric is singular or indefinite at x={list(map(float, x))} {detail}".rstrip())


class DomainError(GeocloseError, ValueError):
    pass


class PreconditionError(GeocloseError, ValueError):
    pass


class IntegrationError(GeocloseError):
    def __init__(self, message, last_good_time=None):
        self.last_good_time = last_good_time
        super().__init__(f"{message} (last good time {last_good_time})")


class DegenerateBlendError(GeocloseError):
    pass


class NumericalDifferentiationError(GeocloseError):
    pass


class SpecInvalidError(GeocloseError, ValueError):
    """A tube-bump specification violates one of its hypotheses."""


class VerificationError(GeocloseError):
    """A post-condition check failed; ``report`` carries the measurements."""

    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)


class ColinearityError(VerificationError):
    pass


class TransversalizationError(GeocloseError):
    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class ConstructionError(GeocloseError):
    """Failure inside one step of the obstacle factor chain."""

    def __init__(self, step, message):
        self.step = step
        super().__init__(f"[{step}] {message}")


class GeometryError(GeocloseError):
    pass


class RecurrenceNotFoundError(GeocloseError):
    def __init__(self, message, best_gap=None):
        self.best_gap = best_gap
        super().__init__(f"{message} (best gap {best_gap})")


class StageError(GeocloseError):
    """Wraps a failure in one stage of the closing pipeline."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


class ConfigError(GeocloseError, ValueError):
    """Malformed or unknown configuration entries."""
