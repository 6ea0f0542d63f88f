"""Exception hierarchy; each class maps to a CLI exit code."""


class FloodTweetsError(Exception):
    exit_code = 1


class ConfigError(FloodTweetsError, ValueError):
    exit_code = 2


class DataError(FloodTweetsError, ValueError):
    exit_code = 3


class TrainingError(FloodTweetsError, RuntimeError):
    exit_code = 4
