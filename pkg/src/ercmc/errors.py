"""Exception hierarchy shared across the package.

Every error raised on purpose derives from ErcmcError so callers (and the
CLI exit-code mapping) can tell deliberate failures from genuine bugs.
"""


class ErcmcError(Exception):
    """Base class for all deliberate failures."""


class DimensionError(ErcmcError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(ErcmcError, ValueError):
    """A softmax row has no unmasked entries."""


class ConfigurationError(ErcmcError, ValueError):
    """A parameter or configuration value is invalid."""


class ContractError(ErcmcError, ValueError):
    """An API precondition was violated by the caller."""


class ParseError(ErcmcError, ValueError):
    """A corpus file is malformed; the message names the line."""


class VocabularyError(ErcmcError, ValueError):
    """A label is absent from a fixed vocabulary."""


class FormatError(ErcmcError, ValueError):
    """A binary file has a bad magic, version or is truncated."""


class ConsistencyError(ErcmcError, ValueError):
    """Two bound artifacts disagree (row counts, dims, checksums)."""


class CoverageError(ErcmcError, ValueError):
    """A provider has no rows for a requested utterance."""


class UndefinedMetricError(ErcmcError, ValueError):
    """The requested metric has an empty support."""


class NumericError(ErcmcError, RuntimeError):
    """A computation produced a non-finite value."""
