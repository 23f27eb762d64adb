class StructureError(ValueError):
    """Inconsistent dimensions or malformed input data."""


class ConditionError(ValueError):
    """A model assumption (stochasticity, invertibility, irreducibility...) fails."""


class ConfigError(ValueError):
    """Invalid experiment configuration."""
