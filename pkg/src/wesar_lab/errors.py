class ConfigError(ValueError):
    """Invalid configuration, shape or argument; the CLI maps it to exit code 2."""


class InputError(ValueError):
    """Bad runtime input such as an out-of-range token id or a missing corpus."""


class DivergedError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class StaleCacheError(RuntimeError):
    """backward() was handed a cache that is not from the latest forward pass."""
