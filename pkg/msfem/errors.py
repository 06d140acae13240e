from __future__ import annotations

from typing import List, Optional, Sequence


class MsfemError(Exception):
    """Base class for all errors raised by msfem."""


class ConfigError(MsfemError, ValueError):
    """Invalid configuration, problem data or violated precondition."""


class InfeasibleError(ConfigError):
    """Hemivariational smallness condition Delta = kappa1 - alpha_j * c_j**2 > 0 fails."""


class MeshError(MsfemError, ValueError):
    def __init__(self, message: str, element: Optional[int] = None) -> None:
        super().__init__(message)
        self.element = element


class MeshMismatchError(MeshError):
    """Two fields do not live on nested meshes of the same domain."""


class NumericalError(MsfemError, RuntimeError):
    """A numerical method failed."""


class SingularSystemError(NumericalError):
    pass


class NonConvergenceError(NumericalError):
    def __init__(self, message: str, residuals: Sequence[float] = (), element: Optional[int] = None) -> None:
        super().__init__(message)
        self.residuals: List[float] = list(residuals)
        self.element = element


class ContractionError(NumericalError):
    """Fixed-point increments stopped contracting as the feasibility bound promises."""

    def __init__(self, message: str, ratios: Sequence[float] = ()) -> None:
        super().__init__(message)
        self.ratios: List[float] = list(ratios)
