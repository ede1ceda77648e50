"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration is internally inconsistent or out of range."""


class ContractViolation(ValueError):
    """A caller broke a documented call contract (missing inputs, bad labels)."""


class CapacityError(ValueError):
    """A dataset split cannot supply the requested episode."""


class DataFormatError(ValueError):
    """An on-disk artifact (tensor file, manifest, checkpoint) is malformed."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the aborting step."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
