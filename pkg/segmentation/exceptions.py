# segmentation/exceptions.py


class SegmentationError(Exception):
    """
    Base class for every error raised by the segmentation library.

    `code` is a stable machine-readable identifier; `field` names the
    offending field, axis or key when there is one.
    """
    code = "segmentation_error"

    def __init__(self, message, field=None, **context):
        super().__init__(message)
        self.message = message
        self.field = field
        self.context = context

    def as_dict(self):
        data = {"code": self.code, "message": self.message}
        if self.field is not None:
            data["field"] = self.field
        data.update(self.context)
        return data


class FormatError(SegmentationError):
    code = "format_error"


class DimensionError(SegmentationError):
    code = "dimension_error"


class ContractError(SegmentationError):
    code = "contract_error"


class StatisticsError(SegmentationError):
    code = "statistics_error"


class DomainError(SegmentationError):
    code = "domain_error"


class ShapeError(SegmentationError):
    code = "shape_error"


class StateError(SegmentationError):
    code = "state_error"


class OptimizerError(SegmentationError):
    code = "optimizer_error"


class TrainingError(SegmentationError):
    code = "training_error"


class ConfigError(SegmentationError):
    code = "config_error"


class EvaluationError(SegmentationError):
    code = "evaluation_error"


class CheckpointError(SegmentationError):
    code = "missing_checkpoint"
