"""Exception hierarchy shared across the toolkit."""


class CdumError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CdumError, ValueError):
    pass


class NumericError(CdumError, ArithmeticError):
    pass


class EmptyDatasetError(CdumError, ValueError):
    pass


class VocabularyError(CdumError, IndexError):
    pass


class TreatmentIndexError(CdumError, IndexError):
    pass


class CategoryError(CdumError, ValueError):
    pass


class MissingArmError(CdumError, ValueError):
    """An evaluation population or training split lacks a treatment arm."""


class ConfigError(CdumError, ValueError):
    pass


class UndefinedMetricError(CdumError, ArithmeticError):
    pass


class ParseError(CdumError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(CdumError, ValueError):
    pass


class CheckpointError(CdumError, ValueError):
    pass
