"""Exception types shared across the package.

The CLI maps these onto exit codes: ``ConfigError`` -> 2, ``DataError`` -> 3,
``NumericError`` -> 4.
"""


class ConfigError(ValueError):
    """Bad configuration key, value or command-line usage."""


class DataError(ValueError):
    """Malformed dataset, manifest, image or checkpoint."""


class NumericError(ArithmeticError):
    """Non-finite values appeared in parameters, activations or losses."""


class InvalidRotationError(ValueError):
    """A quaternion with (numerically) zero norm was supplied."""

    def __init__(self, msg="invalid rotation"):
        super().__init__(msg)


class StaleGraphError(RuntimeError):
    """The neighbour graph no longer matches the cloud and must be rebuilt."""
