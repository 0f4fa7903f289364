"""Exception hierarchy shared across the package.

Data errors cover everything wrong with inputs on disk (audio files,
parameter files, insufficient corpora); numerical errors cover non-finite
values surfacing inside the signal chain or its gradients. The CLI maps
these classes onto distinct exit codes.
"""


class ChanSimError(Exception):
    """Base class for all package-specific errors."""


class DataError(ChanSimError):
    """Bad or insufficient input data."""


class WavFormatError(DataError):
    """File is not a well-formed RIFF/WAVE container."""


class UnsupportedWavError(DataError):
    """WAV container is valid but the codec/bit depth is not supported."""


class ParamSchemaError(DataError):
    """Parameter file violates the persistence schema."""


class InsufficientDataError(DataError):
    """Corpus does not contain enough qualifying chunks."""

    def __init__(self, message: str, found: int = 0, needed: int = 0):
        super().__init__(message)
        self.found = found
        self.needed = needed


class NumericalError(ChanSimError):
    """Non-finite value produced during forward or backward computation."""
