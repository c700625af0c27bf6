"""Exception hierarchy shared by all modules."""


class HanError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(HanError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(HanError, ValueError):
    """A precondition of an operation was violated by the caller."""


class VocabularyError(HanError, IndexError):
    """A token id falls outside the embedding table."""


class ConfigError(HanError, ValueError):
    """Configuration values are invalid or disagree with stored state."""


class ParseError(HanError, ValueError):
    """An input file or string could not be parsed."""


class IngestionError(HanError, OSError):
    """A corpus directory is missing or malformed."""


class CheckpointError(HanError, ValueError):
    """A checkpoint file is corrupt, truncated or of an unknown version."""


class NumericError(HanError, ArithmeticError):
    """A loss or gradient became NaN or infinite.

    ``parameter`` names the offending tensor when one is known.
    """

    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter
