"""Exception hierarchy shared across the package.

Each class maps to a distinct process exit code in the CLI, see cli.EXIT_CODES.
"""


class CtrlcapError(Exception):
    """Base class for all package errors."""


class ConfigError(CtrlcapError):
    """Invalid or inconsistent configuration, detected before any work starts."""


class CorpusError(CtrlcapError):
    """Corpus file or sample violates the dataset schema or an invariant."""


class CheckpointError(CtrlcapError):
    """Checkpoint file is missing, unversioned or structurally invalid."""


class NumericError(CtrlcapError):
    """A numeric operation produced NaN/Inf or an otherwise unusable value."""


class UsageError(CtrlcapError):
    """An API was called with arguments outside its contract."""


class DimensionError(UsageError):
    """Operand shapes are not conformable for the requested operation."""


class MetricError(CtrlcapError):
    """A metric could not be computed (e.g. a noun missing from the table)."""
