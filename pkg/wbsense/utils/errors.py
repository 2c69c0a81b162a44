"""Exception hierarchy shared by the engines, the HTTP views and the CLI.

Every error knows the CLI exit code and the HTTP status it maps to, so
callers translate failures without re-classifying them.
"""


class SensingError(Exception):
    exit_code = 1
    http_status = 500

    def __init__(self, message):
        super().__init__(message)
        self.message = message


class InvalidInputError(SensingError):
    exit_code = 1
    http_status = 400


class ShapeMismatchError(InvalidInputError):
    pass


class UndefinedMetricError(InvalidInputError):
    pass


class StorageError(SensingError):
    exit_code = 2
    http_status = 500

    def __init__(self, message, path=None):
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message)
        self.path = str(path) if path is not None else None


class MissingFileError(StorageError):
    http_status = 404


class CorruptFileError(StorageError):
    pass


class NumericalError(SensingError):
    exit_code = 3
    http_status = 422


class SingularMatrixError(NumericalError):
    pass


class RankDeficientError(NumericalError):
    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class TrainingDivergedError(NumericalError):
    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch
