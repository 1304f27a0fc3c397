"""Exception types shared across the package.

Every raise in the library goes through one of these (or a stdlib builtin
like IndexError where that is the natural fit), so callers and the CLI can
map failure classes to exit codes without string matching.
"""


class TimeAlignError(Exception):
    """Base class for all library errors."""


class ConfigError(TimeAlignError):
    """A configuration value is out of range or inconsistent."""


class DataError(TimeAlignError):
    """Input data violates a precondition (empty scene, non-finite values...)."""


class ShapeError(TimeAlignError):
    """A tensor or array has the wrong rank, size, or channel count."""


class FormatError(TimeAlignError):
    """A serialized file is malformed (bad magic, truncated payload...)."""


class GradcheckError(TimeAlignError):
    """The finite-difference harness was invoked on unsupported inputs."""


class DivergenceError(TimeAlignError):
    """Training produced a non-finite loss."""
