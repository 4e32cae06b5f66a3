"""Exception hierarchy shared by every stage of the pipeline."""


class IfmError(Exception):
    """Base class for all errors raised by :mod:`ifmotion`."""


class DataError(IfmError):
    """Malformed or invalid input data (files, trials, descriptors)."""


class ConfigError(IfmError):
    """Invalid parameter combination."""


class NoMovementError(DataError):
    """The wrist speed never exceeded the onset threshold."""

    def __init__(self, trial_id):
        super().__init__(f"no movement detected in trial {trial_id!r}")
        self.trial_id = trial_id


class DegenerateFrameError(DataError):
    """The hand-dorsum markers are (nearly) collinear."""

    def __init__(self, condition_number, sample=None):
        where = "" if sample is None else f" at sample {sample}"
        super().__init__(
            f"degenerate hand frame{where}: condition number {condition_number:.3g}")
        self.condition_number = condition_number
        self.sample = sample


class DegenerateKernelError(IfmError):
    """All training histograms of a channel are identical, so A_i = 0."""


class ConvergenceError(IfmError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, violation=None):
        super().__init__(message)
        self.violation = violation
