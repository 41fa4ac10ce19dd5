class CalibrationError(Exception):
    """
    Base for every error the toolkit raises on purpose. The CLI maps it to exit code 2.
    """

    exit_code = 2


class ShapeError(CalibrationError):
    pass


class NumericError(CalibrationError):
    pass


class ConfigError(CalibrationError):
    pass


class DataError(CalibrationError):
    pass


class ParseError(DataError):
    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = 'line {0}: {1}'.format(line_number, message)
        super(ParseError, self).__init__(message)
        self.line_number = line_number


class StorageError(CalibrationError):
    pass


class UsageError(CalibrationError):
    exit_code = 1
