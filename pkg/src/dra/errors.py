"""Exception types shared across the package."""


class DRAError(Exception):
    pass


class InputShapeError(DRAError, ValueError):
    pass


class NumericError(DRAError, FloatingPointError):
    pass


class ConfigError(DRAError, ValueError):
    pass


class DataError(DRAError, ValueError):
    pass


class ConsistencyError(DRAError, ValueError):
    """Scores or samples disagree with the active ablation mask."""


class StateError(DRAError, RuntimeError):
    pass
