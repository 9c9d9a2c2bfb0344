"""Exception taxonomy shared by all cpnslab modules."""


class CpnslabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CpnslabError):
    """A configuration value or shape contract is invalid."""


class InputError(CpnslabError):
    """Runtime data handed to an operation is invalid (bad label, empty batch, ...)."""


class UsageError(CpnslabError):
    """An operation was called in a state where it is not defined."""


class ParseError(CpnslabError):
    """A data file could not be parsed; message names the offending line."""


class FormatError(CpnslabError):
    """A data file parsed but violates the declared format contract."""


class NumericsError(CpnslabError):
    """A non-finite value surfaced where finite numbers are required (NaN gradient)."""


class PropositionViolation(CpnslabError):
    """The monotonicity upper bound was breached; indicates a bug, never expected."""
