"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for engine errors."""


class FormatError(EngineError):
    """A file's bytes do not match the expected on-disk format."""


class ValidationError(EngineError):
    """Well-formed input whose content violates a schema or invariant."""


class CapacityError(EngineError):
    """A guard limit was exceeded (sequence length, search-space size)."""
