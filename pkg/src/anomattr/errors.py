"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class AnomAttrError(Exception):
    exit_code = 2

    def to_json(self) -> dict:
        return {"error": type(self).__name__, "message": str(self)}


class ValidationError(AnomAttrError):
    """Bad input: schema, shapes, ranges."""


class MissingColumn(ValidationError):
    pass


class ExtraColumn(ValidationError):
    pass


class UnparseableTimestamp(ValidationError):
    pass


class DuplicateTimestamp(ValidationError):
    pass


class MultipleGrids(ValidationError):
    pass


class EmptyAfterAggregation(ValidationError):
    pass


class AlbedoOutOfRange(ValidationError):
    pass


class AllOutliers(ValidationError):
    pass


class SeriesTooShort(ValidationError):
    pass


class TooFewRows(ValidationError):
    pass


class KOutOfRange(ValidationError):
    pass


class SingleCluster(ValidationError):
    pass


class EmptyCluster(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class WindowTooLarge(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


class ModelDataMismatch(ValidationError):
    pass


class DegenerateLabels(ValidationError):
    pass


class TooFewSamples(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class SingleClassTraining(ValidationError):
    pass


class UnknownFeatureInRanking(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class NumericalError(AnomAttrError):
    exit_code = 3


class NonFiniteLoss(NumericalError):
    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index

    def to_json(self) -> dict:
        out = super().to_json()
        out["batch_index"] = self.batch_index
        return out


class TooFewExceedances(NumericalError):
    """Raised internally by the GPD fit; callers normally get the quantile fallback."""


class IOFailure(AnomAttrError):
    exit_code = 4
