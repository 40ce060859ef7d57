class AvguardError(RuntimeError):
    """Base class for every error raised by avguard."""


class FormatError(AvguardError):
    """A file could not be parsed at all (malformed header, truncated payload)."""


class UnsupportedFormatError(AvguardError):
    """A well-formed file whose encoding is outside the supported corpus format."""


class InsufficientInputError(AvguardError):
    """The input is too short for the requested operation."""


class ConfigurationError(AvguardError):
    """Parameters that cannot describe a valid operator, model or run."""


class DatasetError(AvguardError):
    """Corpus or paired-dataset construction failed."""


class SplitError(DatasetError):
    """A dataset cannot be partitioned as requested."""


class InputError(AvguardError):
    """Tensors or labels handed to an operation violate its input contract."""


class DivergenceError(AvguardError):
    """Training produced a non-finite loss."""
