"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 1, runtime numeric failures with 2, and I/O failures with 3.
"""


class S3PETError(Exception):
    """Base class for all package errors."""


class ConfigError(S3PETError):
    """Invalid configuration, option combination, or input data layout."""


class InputError(ConfigError):
    """Runtime input outside the declared domain (e.g. out-of-vocabulary id)."""


class StructureFormatError(ConfigError):
    """A structure file failed to parse or validate; message names the field."""


class DimensionError(S3PETError):
    """Tensor shape mismatch in a numeric operation."""


class NumericError(S3PETError):
    """Non-finite value or other numeric failure during computation."""
