"""Exception hierarchy shared by every module of the vocoder."""


class VocoderError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(VocoderError, ValueError):
    pass


class ContractError(VocoderError, ValueError):
    """A documented precondition of an operation was violated."""


class InsufficientInputError(VocoderError, ValueError):
    pass


class ConfigError(VocoderError, ValueError):
    pass


class UnsupportedFormatError(VocoderError, ValueError):
    pass


class RateMismatchError(VocoderError, ValueError):
    pass


class ManifestError(VocoderError, ValueError):
    """A checkpoint or control-track directory is missing, corrupted or incompatible."""


class NonFiniteGradientError(VocoderError, FloatingPointError):
    def __init__(self, message, name=None, index=None, iteration=None):
        super().__init__(message)
        self.name = name
        self.index = index
        self.iteration = iteration
