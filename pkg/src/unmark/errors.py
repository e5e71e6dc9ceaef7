"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class UnmarkError(Exception):
    exit_code = 1


class ConfigError(UnmarkError):
    exit_code = 2


class VersionError(ConfigError):
    """Checkpoint format or architecture does not match what was requested."""


class DataError(UnmarkError):
    exit_code = 3


class ImageIOError(DataError, OSError):
    pass


class FormatError(DataError):
    pass


class PlacementError(DataError):
    pass


class CapacityError(DataError):
    pass


class IntegrityError(DataError):
    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


class CheckpointError(DataError):
    pass


class NumericError(UnmarkError):
    exit_code = 4

    def __init__(self, component, step=None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss component '{component}'{where}")
        self.component = component
        self.step = step


class ShapeError(ValueError):
    pass
