"""Exception types shared across the package.

The CLI maps these onto its exit codes (config 2, data 3, numeric 4);
everything else is a plain ValueError.
"""


class ConfigError(ValueError):
    """Bad or inconsistent configuration."""


class DataError(ValueError):
    """Corpus, manifest, or checkpoint contents are unusable."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or diverged."""
