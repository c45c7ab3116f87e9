"""Exception taxonomy shared by the library and the CLI exit codes."""


class ToolkitError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigurationError(ToolkitError):
    """Bad or inconsistent configuration (unknown keys, invalid values)."""

    exit_code = 2


class GenerationError(ConfigurationError):
    """Synthetic generation cannot satisfy the requested configuration."""


class InputError(ToolkitError):
    """Bad runtime input: shapes, paths, unknown lookups, file contents."""

    exit_code = 3


class LayoutError(InputError):
    """A dataset directory tree is missing a mandatory piece."""


class DecodeError(InputError):
    """An image file exists but cannot be decoded."""


class EvaluationError(InputError):
    """Evaluation preconditions violated (e.g. single-class AUROC input)."""


class NumericError(ToolkitError):
    """Numerical failure: NaN loss, factorization breakdown, non-finite score."""

    exit_code = 4


class TrainingError(NumericError):
    """Training diverged; message carries the offending step index."""


class CalibrationError(ToolkitError):
    """Degenerate calibration data (zero spread on the validation split)."""

    exit_code = 5
