"""Exception hierarchy. Categories map onto CLI exit codes."""


class StochdetError(Exception):
    exit_code = 1


class ConfigError(StochdetError, ValueError):
    exit_code = 2


class DataError(StochdetError, ValueError):
    exit_code = 3


class NumericError(StochdetError, ArithmeticError):
    exit_code = 4


class MixedImages(DataError):
    pass


class EmptyRuns(DataError):
    pass


class EmptyInput(DataError):
    pass


class EmptyBatch(DataError):
    pass


class MismatchedImageIds(DataError):
    pass


class ZeroWeightMass(DataError):
    pass


class UnknownClass(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, *, field=None, line=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.field = field
        self.line = line


class IntegrityError(DataError):
    pass


class StepOutOfRange(ConfigError):
    pass


class DivergedLoss(NumericError):
    pass
