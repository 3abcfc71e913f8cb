"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class UsageError(ValueError):
    """An operation was invoked outside its contract (bad argument, bad state)."""


class BundleFormatError(ValueError):
    """An on-disk dataset bundle or model checkpoint is malformed."""
