"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1,
data problems exit 2, numeric faults exit 3.
"""


class DynexitError(Exception):
    """Base class for all package-specific errors."""


class UsageError(DynexitError):
    """Bad invocation: unknown flags, malformed config, empty sweep grid."""


class ConfigurationError(DynexitError):
    """Inconsistent model / operation configuration (shape or option mismatch)."""


class AlignmentError(DynexitError):
    """Sequences that must share timestamps or lengths do not."""


class DataError(DynexitError):
    """Missing or corrupt input artifacts (feature files, annotations, checkpoints)."""


class NumericFault(DynexitError):
    """Non-finite value encountered; message names the offending component."""
