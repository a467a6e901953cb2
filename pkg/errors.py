"""
Exception hierarchy shared by every PAN module.
Each error carries the process exit code the CLI maps it to.
"""


class PanError(Exception):
    """Base class for all PAN failures"""

    exit_code = 1


class ConfigurationError(PanError):
    """Shape, channel or hyper-parameter contract violated"""

    exit_code = 2


class DataError(PanError):
    """Input data missing, corrupt or outside its contract"""

    exit_code = 2


class WindowRangeError(DataError):
    """Timeslot too early for the configured lookback windows"""

    def __init__(self, t: int, minimum: int):
        super().__init__(f"timeslot {t} is below the earliest valid slot {minimum}")
        self.t = t
        self.minimum = minimum


class NumericalError(PanError):
    """NaN/Inf reached a gradient or a loss"""

    exit_code = 3


class ArtifactMismatchError(PanError):
    """Checkpoint or archive does not belong to the active configuration"""

    exit_code = 4
