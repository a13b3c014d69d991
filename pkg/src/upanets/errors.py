"""Exception types shared across the package."""


class UpaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(UpaError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(UpaError):
    """A configuration value is invalid (strides, groups, widths, ...)."""


class NumericError(UpaError):
    """A non-finite value showed up where finite math was expected."""


class StateError(UpaError):
    """An operation ran before its required state was initialized."""


class InputError(UpaError):
    """Input values are out of their valid domain."""


class FormatError(UpaError):
    """A file or byte stream does not match its declared format."""
