"""Exception hierarchy.

Every error carries a short machine-readable ``code`` which the CLI prints as
``ERROR:<code>: message``.
"""


class DeepGMMError(Exception):
    code = "Error"


class ZeroVariance(DeepGMMError):
    code = "ZeroVariance"


class DimensionMismatch(DeepGMMError):
    code = "DimensionMismatch"


class EmptyComponent(DeepGMMError):
    code = "EmptyComponent"

    def __init__(self, message, components=()):
        super().__init__(message)
        self.components = tuple(components)


class TooFewPixels(DeepGMMError):
    code = "TooFewPixels"


class ShapeError(DeepGMMError):
    code = "ShapeError"


class ConfigMismatch(DeepGMMError):
    code = "ConfigMismatch"


class StaleActivations(DeepGMMError):
    code = "StaleActivations"


class NonFinite(DeepGMMError):
    code = "NonFinite"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class MissingClass(DeepGMMError):
    code = "MissingClass"


class HeterogeneousChannels(DeepGMMError):
    code = "HeterogeneousChannels"


class DomainMismatch(DeepGMMError):
    code = "DomainMismatch"


class TooManyClasses(DeepGMMError):
    code = "TooManyClasses"


class SpecInvalid(DeepGMMError):
    code = "SpecInvalid"


class ConfigError(DeepGMMError):
    code = "ConfigError"


class IoError(DeepGMMError):
    code = "IoError"


class TensorFormatError(DeepGMMError):
    code = "TensorFormatError"


class BadMagic(TensorFormatError):
    code = "BadMagic"


class BadVersion(TensorFormatError):
    code = "BadVersion"


class UnsupportedDtype(TensorFormatError):
    code = "UnsupportedDtype"


class TruncatedPayload(TensorFormatError):
    code = "TruncatedPayload"


class TrailingBytes(TensorFormatError):
    code = "TrailingBytes"
