"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


class FormatError(ValueError):
    """A file on disk has the wrong magic, version, or layout."""


class CorruptionError(FormatError):
    """A payload failed its checksum."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or inf values."""
