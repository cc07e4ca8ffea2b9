"""Exception hierarchy shared across the package."""


class TrajDistillError(Exception):
    pass


class DimensionError(TrajDistillError, ValueError):
    pass


class ContractError(TrajDistillError):
    pass


class InputError(TrajDistillError, ValueError):
    pass


class ConfigError(TrajDistillError, ValueError):
    pass


class IntegrityError(TrajDistillError):
    pass


class VersionError(IntegrityError):
    pass


class TrainingError(TrajDistillError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DivergenceError(TrajDistillError):
    def __init__(self, message, step=None, iteration=None):
        super().__init__(message)
        self.step = step
        self.iteration = iteration


class DegenerateSegmentError(TrajDistillError):
    pass


class DegenerateAngleError(TrajDistillError):
    pass
