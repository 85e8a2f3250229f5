"""Exception types shared across the package."""


class HalbachError(Exception):
    """Domain error: inputs are well-formed but violate a model contract."""


class ConfigError(HalbachError):
    """Configuration error: malformed config file, schema violation, bad flag."""
