"""Exception hierarchy. CLI exit codes are attached to the top-level classes."""


class FairVAEError(Exception):
    exit_code = 1


class ConfigError(FairVAEError):
    exit_code = 2


class DataError(FairVAEError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class StratificationError(DataError):
    pass


class VocabularyMismatch(DataError):
    pass


class NumericError(FairVAEError):
    exit_code = 4


class ShapeError(NumericError, ValueError):
    pass


class ModelError(NumericError):
    pass


class TrainingError(NumericError):
    pass


class MetricError(FairVAEError):
    exit_code = 3


class UndefinedMetricError(MetricError):
    pass


class CheckpointError(FairVAEError):
    exit_code = 3
