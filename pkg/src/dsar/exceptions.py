"""Exception and warning classes raised across the package."""


class DSARError(Exception):
    """Base class for all errors raised by dsar."""


class DimensionError(DSARError, ValueError):
    pass


class ConfigurationError(DSARError, ValueError):
    pass


class ModelValidityError(DSARError, ValueError):
    """A noise or network model whose implied covariance is not valid."""


class SolverError(DSARError, RuntimeError):
    """Fixed-point response synthesis failed to converge."""

    def __init__(self, message, spectral_bound=None):
        super().__init__(message)
        self.spectral_bound = spectral_bound


class ConvergenceError(DSARError, RuntimeError):
    """Local Newton optimizer hit ``max_iter``; ``last_theta`` holds the last iterate."""

    def __init__(self, message, last_theta=None, grad_norm=None):
        super().__init__(message)
        self.last_theta = last_theta
        self.grad_norm = grad_norm


class AggregationError(DSARError, ArithmeticError):
    """A Hessian needed on the master or in a Newton step is singular."""

    def __init__(self, message, worker_id=None):
        super().__init__(message)
        self.worker_id = worker_id


class ProtocolError(DSARError):
    """Messages that cannot be combined (e.g. packs built with different projectors)."""


class NegativeVarianceError(DSARError, ArithmeticError):
    """Projected covariance has a negative diagonal entry; increase the projection dimension."""


class WorkerFailure(DSARError):
    def __init__(self, message, worker_id=None, stage=None):
        super().__init__(message)
        self.worker_id = worker_id
        self.stage = stage


class IsolatedNodeWarning(UserWarning):
    """Nodes with zero out-degree get an all-zero row in W."""
