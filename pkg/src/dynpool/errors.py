"""Error types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes or extents violate an operation's contract."""


class LayoutError(ValueError):
    """A sequence layout is inconsistent with the tensor it describes."""


class StateError(RuntimeError):
    """An operation was invoked in the wrong lifecycle state."""


class CapacityError(RuntimeError):
    """A sequence or grid exceeds a configured maximum."""


class ConfigError(ValueError):
    """A configuration value is invalid or incompatible with a checkpoint."""


class ContractError(ValueError):
    """A precondition on an operation's inputs was violated."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss."""
