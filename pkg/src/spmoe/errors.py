"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError/usage -> 1,
DataFormatError -> 2, NumericError -> 3.
"""


class SpmoeError(Exception):
    """Base class for all package errors."""


class ShapeError(SpmoeError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(SpmoeError):
    """A configuration value violates its documented constraints."""


class DataFormatError(SpmoeError):
    """A data file is malformed, truncated, or fails invariant checks."""


class VersionError(DataFormatError):
    """A file carries an unsupported format version."""


class InvariantError(SpmoeError):
    """A structural invariant (e.g. empty superpoint) was violated."""


class EmptyPromptError(SpmoeError):
    """A box or mask prompt selects no superpoints."""


class NumericError(SpmoeError):
    """NaN/Inf encountered, or a gradient check exceeded tolerance."""
