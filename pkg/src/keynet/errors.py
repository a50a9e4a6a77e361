"""Exception types shared across the package."""


class KeynetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(KeynetError):
    """Operand dimensions do not conform."""


class ParameterError(KeynetError):
    """A configuration value is outside its legal range."""


class ContractError(KeynetError):
    """An input violates an operation's calling contract."""


class WrongSensorError(ContractError):
    """Encoded data does not originate from the sensor this network is keyed to."""


class UnsupportedLayerError(KeynetError):
    """The network contains a layer kind this engine cannot lower."""


class SingularSystemError(KeynetError):
    """A probe set is rank deficient and the recovery system cannot be solved."""


class UnsupportedExactError(KeynetError):
    """Exact physical realization was requested for a key that only admits an approximation."""


class FormatError(KeynetError):
    """A serialized artifact is malformed or fails its integrity checks."""
