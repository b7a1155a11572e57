"""Exception hierarchy shared by the pipeline stages."""


class FlashbangError(Exception):
    """Base class for all pipeline errors."""

    #: short tag used in per-scene failure reports
    reason = "error"


class ConfigurationError(FlashbangError, ValueError):
    reason = "configuration"


class RenderError(FlashbangError):
    reason = "render"


class InputError(FlashbangError, ValueError):
    reason = "input"


class TrackingError(FlashbangError):
    reason = "tracking-lost"

    def __init__(self, message, last_good_index=None):
        super().__init__(message)
        self.last_good_index = last_good_index


class NoCollisionError(FlashbangError):
    reason = "no-collision"


class EstimationError(FlashbangError):
    # a collision window was found but no usable intersection came out of it
    reason = "no-collision"


class NoOnsetError(FlashbangError):
    reason = "no-onset"


class NegativeDelayError(FlashbangError, ValueError):
    reason = "negative-delay"


class CalibrationError(FlashbangError):
    reason = "calibration"


class ReportError(FlashbangError):
    reason = "report"
