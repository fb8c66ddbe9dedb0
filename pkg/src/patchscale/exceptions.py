class ConfigError(ValueError):
    """Invalid configuration value or file."""


class OracleCapError(RuntimeError):
    """Exhaustive search space exceeds the configured cap."""
