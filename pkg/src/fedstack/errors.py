"""Exception types shared across the package."""


class FedstackError(Exception):
    """Base class for everything raised deliberately by this package."""


class DimensionError(FedstackError, ValueError):
    """Array shapes do not conform to the documented contract."""


class RankOverflowError(FedstackError, ValueError):
    """A requested or implied rank exceeds what the layer can hold."""


class NumericError(FedstackError, ArithmeticError):
    """A computation left the domain where results are trustworthy."""


class ProtocolError(FedstackError, RuntimeError):
    """A message was routed or composed in a way the protocol forbids."""


class ConfigError(FedstackError, ValueError):
    """A scenario configuration failed validation."""
