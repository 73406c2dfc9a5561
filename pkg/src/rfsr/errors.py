class RfsrError(Exception):
    exit_code = 1


class ConfigError(RfsrError):
    exit_code = 2


class DataError(RfsrError):
    exit_code = 3


class NumericError(RfsrError):
    exit_code = 4
