"""Exception hierarchy.

Every error carries the CLI exit code of the stage family it belongs to, so
the command layer can map failures without a lookup table.
"""


class ZoneBenchError(Exception):
    exit_code = 1


class ConfigError(ZoneBenchError):
    exit_code = 2


class DataError(ZoneBenchError):
    exit_code = 3


class InputError(DataError):
    pass


class DecodeError(DataError):
    def __init__(self, failures):
        self.failures = list(failures)
        lines = "\n".join(f"  {path}: {why}" for path, why in self.failures)
        super().__init__(f"could not decode {len(self.failures)} file(s):\n{lines}")


class SchemaError(DataError):
    pass


class GeometryError(DataError):
    pass


class BoundsError(DataError):
    pass


class PairingError(DataError):
    pass


class SplitError(DataError):
    pass


class AugmentationError(DataError):
    pass


class ShapeError(ZoneBenchError, ValueError):
    exit_code = 5


class CheckpointFormatError(ZoneBenchError):
    exit_code = 5


class DivergenceError(ZoneBenchError):
    exit_code = 4


class EvaluationError(ZoneBenchError):
    exit_code = 5


class ComparabilityError(EvaluationError):
    pass
