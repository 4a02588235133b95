"""Exception hierarchy.

Every error carries an ``exit_code`` so the command-line layer can map
failures onto its 2/3/4 convention without a lookup table.
"""


class DistilMOSError(Exception):
    exit_code = 1


class ConfigError(DistilMOSError):
    exit_code = 2


class DataError(DistilMOSError):
    exit_code = 3


class NumericalError(DistilMOSError):
    exit_code = 4


# data
class MissingFile(DataError):
    pass


class MalformedRow(DataError):
    def __init__(self, line, reason):
        self.line = line
        super().__init__(f"line {line}: {reason}")


class DuplicateId(DataError):
    pass


class InvalidCount(ConfigError):
    pass


class EmptyBatch(DataError):
    pass


# ssl backend / model
class TooShortInput(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class AllFramesMasked(DataError):
    pass


class WrongHeadMode(ConfigError):
    pass


# tokenizer
class InsufficientData(DataError):
    pass


class DimMismatch(DataError):
    pass


class MissingLayerCodebook(ConfigError):
    pass


class CorruptFile(DataError):
    pass


# losses / trainer
class NonFiniteInput(NumericalError):
    pass


class TargetOutOfRange(DataError):
    pass


class MissingCodebooks(ConfigError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class StepOutOfRange(ConfigError):
    pass


# evaluation / cca
class DegenerateInput(NumericalError):
    pass


class IncompatibleCheckpoint(ConfigError):
    pass


class RankDeficient(NumericalError):
    pass
