"""Exception hierarchy shared by every stage of the simulator."""


class CvqkdError(Exception):
    """Base class; carries a short machine-readable code for the CLI."""

    code = "error"

    def to_dict(self) -> dict:
        return {"error": self.code, "message": str(self)}


class ParameterError(CvqkdError, ValueError):
    code = "parameter"


class ConfigurationError(CvqkdError, ValueError):
    code = "configuration"


class InsufficientDataError(CvqkdError, ValueError):
    code = "insufficient_data"


class LowPilotSnrError(CvqkdError, RuntimeError):
    code = "low_pilot_snr"


class UnwrapError(CvqkdError, RuntimeError):
    code = "unwrap"


class SyncError(CvqkdError, RuntimeError):
    code = "sync_failure"


class CalibrationError(CvqkdError, RuntimeError):
    code = "calibration_unstable"


class UnreliableEstimateError(CvqkdError, RuntimeError):
    code = "unreliable_estimate"


class NonPhysicalError(CvqkdError, ValueError):
    code = "nonphysical_covariance"

    def __init__(self, message: str, inputs: dict | None = None):
        super().__init__(message)
        self.inputs = inputs or {}

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["inputs"] = self.inputs
        return d


class DomainError(CvqkdError, ValueError):
    code = "domain"
