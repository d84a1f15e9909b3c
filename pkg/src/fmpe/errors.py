"""Exception hierarchy. CLI exit codes key off these classes."""


class FMPEError(Exception):
    exit_code = 1


class ConfigError(FMPEError, ValueError):
    exit_code = 2


class ShapeError(FMPEError, ValueError):
    exit_code = 2


class NumericError(FMPEError, FloatingPointError):
    exit_code = 3

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (index {index})")
        self.index = index


class IntegrationError(NumericError):
    pass


class StorageError(FMPEError, OSError):
    exit_code = 4
