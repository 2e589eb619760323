"""Exception hierarchy shared across the toolkit."""


class GridChargeError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(GridChargeError):
    """Bad configuration: unknown keys, malformed values, incompatible flags."""


class ValidationError(GridChargeError):
    """Input data violates a documented invariant (bad CSV row, infeasible request, ...)."""


class ParameterError(ValidationError):
    """Controller parameters are dimensionally or structurally inconsistent."""


class SimulationError(GridChargeError):
    """Numerical failure during a simulation run (non-finite state, broken invariant)."""
