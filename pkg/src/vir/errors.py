"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A scalar parameter is outside its admissible range."""


class MissingWeightError(KeyError):
    """A weight required by the encoder is absent from the store."""

    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"missing weight {self.name!r}"


class StreamOrderError(RuntimeError):
    """Tokens were fed to a streaming session in the wrong number or order."""


class WeightFormatError(ValueError):
    """Base class for malformed weight container files."""


class BadMagicError(WeightFormatError):
    pass


class VersionMismatchError(WeightFormatError):
    pass


class ManifestError(WeightFormatError):
    pass


class PayloadLengthError(WeightFormatError):
    pass


class UnknownDtypeError(WeightFormatError):
    pass
