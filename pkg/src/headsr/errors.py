"""Exception types shared across the package.

ContractViolation subclasses map to CLI exit code 2, DivergenceError to
exit code 3.
"""


class ContractViolation(ValueError):
    """A documented precondition or interface contract was violated."""


class BehindCameraError(ContractViolation):
    """Point lies behind the camera near plane."""


class ShapeError(ContractViolation):
    """Array arguments have incompatible shapes ("raster shape error" etc.)."""


class DegenerateInputError(ContractViolation):
    """Degenerate face, observation, or population."""


class SerializationError(ContractViolation):
    """Malformed or inconsistent on-disk artifact."""


class StaleForwardState(ContractViolation):
    """Backward pass invoked with a cache from a different forward pass."""


class UpsamplerContractError(ContractViolation):
    """External upsampler returned output violating the file contract."""


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss."""

    def __init__(self, iteration: int, message: str = "diverged"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration
