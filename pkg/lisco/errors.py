class LiscoError(Exception):
    """Base class for every error raised by lisco."""


class ValidationError(LiscoError):
    """Bad input, config or file. The CLI exits with code 2."""

    exit_code = 2


class NumericalError(LiscoError):
    """A computation could not produce a usable result. The CLI exits with code 3."""

    exit_code = 3


class DimensionError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class WeightFileError(ValidationError):
    pass


class GenerationError(NumericalError):
    pass


class SingularPointError(NumericalError):
    pass


class ZeroResidualError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class GapUndefinedError(NumericalError):
    pass


class OracleError(NumericalError):
    pass


class ExperimentError(LiscoError):
    """Raised by the experiment pipeline; remembers which stage failed."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def exit_code(self) -> int:
        return getattr(self.cause, "exit_code", 1)
