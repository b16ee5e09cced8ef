"""Exception types raised across the package."""


class MpptSimError(Exception):
    """Base class for all package errors."""


class SolverError(MpptSimError):
    """A root solve did not converge within its iteration cap."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class CalibrationError(MpptSimError):
    """No (r_series, r_shunt) pair reproduces the datasheet maximum power."""


class InstabilityError(MpptSimError):
    """The plant integration produced a non-finite state."""

    def __init__(self, state_name, t):
        super().__init__(f"non-finite {state_name} at t={t:.6g} s; reduce dt")
        self.state_name = state_name
        self.t = t


class ConfigError(MpptSimError):
    """Invalid scenario, module or controller configuration."""


class DivergenceError(MpptSimError):
    """Network training produced a non-finite loss."""
