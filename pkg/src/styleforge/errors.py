"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: usage problems exit 1,
data problems exit 2, numerical divergence exits 3.
"""


class StyleforgeError(Exception):
    """Base class for all package-specific errors."""


class DataError(StyleforgeError):
    """Malformed or inconsistent input data (files, configs, corpora)."""


class ConfigError(DataError):
    """Bad key, value, or type in a configuration file."""


class DivergenceError(StyleforgeError):
    """Training produced a non-finite loss."""


class FrozenDiscriminatorError(StyleforgeError):
    """An update was attempted on a frozen discriminator."""


class NotPretrainedError(StyleforgeError):
    """The discriminator was used as a classifier before pretraining."""
