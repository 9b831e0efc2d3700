"""Error taxonomy shared across the pipeline. The CLI maps these onto exit
codes: usage/config 1, data 2, numeric divergence 3, oracle 4."""


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    """Training produced non-finite values; carries a diagnostic payload."""


class OracleError(RuntimeError):
    """The guidance oracle failed or returned malformed data."""


class NoRegionFoundError(RuntimeError):
    """Locating selected zero faces."""


class FrozenRegionError(RuntimeError):
    """Non-region parameters changed during editing (invariant breach)."""
