"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes or widths of operands disagree."""


class ConfigError(ValueError):
    """A block or backbone configuration violates its invariants."""
