"""Exception hierarchy.

Each family maps to a distinct CLI exit code so scripted runs can tell a bad
config from bad data or a diverged training run.
"""


class SemGuideError(Exception):
    exit_code = 1


class ConfigError(SemGuideError, ValueError):
    exit_code = 2


class DataError(SemGuideError, ValueError):
    exit_code = 3


class ShapeError(SemGuideError, ValueError):
    exit_code = 3


class ScheduleError(SemGuideError, ValueError):
    exit_code = 2


class TrainingError(SemGuideError, RuntimeError):
    exit_code = 4
