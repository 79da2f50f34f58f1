"""Exception types raised across mixq."""


class MixqError(Exception):
    """Base class for all mixq errors."""


class ContractError(MixqError, ValueError):
    """An operation was called with arguments that violate its preconditions."""


class ShapeError(ContractError):
    pass


class CalibrationError(MixqError):
    pass


class ConfigError(MixqError):
    pass


class CheckpointError(MixqError):
    pass


class KernelBoundError(ContractError):
    """Integer GEMM inner dimension too large for exact int32 accumulation."""


class TrainingDiverged(MixqError):
    """Loss became non-finite. ``record`` carries the diagnostic snapshot."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record
