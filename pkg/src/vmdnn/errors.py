"""Exception types raised across the package."""


class VMDNNError(Exception):
    """Base class for all package errors."""


class DomainError(VMDNNError, ValueError):
    """A numerical primitive received an argument outside its domain."""


class ConfigurationError(VMDNNError, ValueError):
    """Shapes, sizes or time constants are inconsistent."""


class DivergenceError(VMDNNError, ArithmeticError):
    """A non-finite value appeared during a rollout or gradient computation."""

    def __init__(self, layer, step, what="activation"):
        self.layer = layer
        self.step = step
        self.what = what
        super().__init__(f"non-finite {what} in layer {layer} at step {step}")


class CheckpointError(VMDNNError):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass
