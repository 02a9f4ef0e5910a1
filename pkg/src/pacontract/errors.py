"""Exception hierarchy shared by all modules."""


class PAContractError(Exception):
    """Base class for library errors."""


class ModelError(PAContractError):
    """Invalid problem instance or coefficient evaluation failure."""


class SimulationError(PAContractError):
    """Invalid simulation request (e.g. jump probability too large)."""


class ConvergenceError(PAContractError):
    """An iterative solver did not reach its tolerance.

    Attributes
    ----------
    last_iterate:
        The final iterate when the solver stopped.
    residual:
        The residual reported at that iterate.
    """

    def __init__(self, message, last_iterate=None, residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class RegressionError(PAContractError):
    """Least-squares regression is rank deficient."""


class CFLError(PAContractError):
    """Time step violates the stability condition of the explicit scheme."""

    def __init__(self, message, required_dt=None):
        super().__init__(message)
        self.required_dt = required_dt


class DimensionError(PAContractError):
    """Grid solver refuses the requested state dimension."""
