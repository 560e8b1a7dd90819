"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is out of its legal range."""


class ContractError(ValueError):
    """Caller violated an operation's precondition beyond mere shapes."""


class FormatError(ValueError):
    """A file or document does not conform to its on-disk format."""
