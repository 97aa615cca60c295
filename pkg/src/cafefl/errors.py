class ConfigError(ValueError):
    """Invalid configuration value or incompatible dimensions."""


class UsageError(RuntimeError):
    """An operation was called without the state it depends on."""


class DivergenceError(FloatingPointError):
    """A gradient or parameter became non-finite during training."""


class LoadError(ValueError):
    """Malformed input file (IDX data, checkpoint)."""
