"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's documented precondition."""


class DimensionError(ContractError):
    """Array shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """A configuration value is unusable (e.g. non-integral conv output size)."""


class DegenerateBatchError(ValueError):
    """Batch statistics were requested on fewer than two rows."""


class DegenerateNeighborhoodError(ValueError):
    """A neighborhood has too few distinct points to fit a plane."""


class EmptyFrameError(ValueError):
    """Ray sampling produced zero surface hits; the scene is misconfigured."""


class DatasetFormatError(ValueError):
    """A dataset or checkpoint file is corrupt, truncated, or version-mismatched."""
