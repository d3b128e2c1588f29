"""Exception types shared across the library."""


class InhibitorError(Exception):
    """Base class for all errors raised by this library."""


class ShapeError(InhibitorError):
    """Operand shapes violate an operation's contract."""


class ContractError(InhibitorError):
    """An API precondition was violated by the caller."""


class DegenerateReductionError(InhibitorError):
    """A reduction slice had no contributing elements (empty or fully masked)."""


class NonFiniteError(InhibitorError):
    """A tensor holds NaN or infinite values."""


class InternalError(InhibitorError):
    """An internal invariant was broken (library bug, not caller error)."""


class InputError(InhibitorError):
    """User-supplied data is invalid (token ids, labels, datasets)."""


class ConfigError(InhibitorError):
    """A configuration file failed to parse or validate."""


class CheckpointError(InhibitorError):
    """A checkpoint file is missing, malformed, or corrupt."""
