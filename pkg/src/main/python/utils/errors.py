#!/usr/bin/env python3
"""
Error Hierarchy

Typed failures of the toolkit. Every error carries a stable ``kind`` plus optional
location fields so the CLI can emit machine-readable error documents.
"""

from typing import Any, Dict, Optional


class LqTeamError(Exception):
    """Base class for all toolkit errors"""

    kind = "error"
    exit_code = 1

    def __init__(self, message: str, kind: Optional[str] = None, node: Optional[int] = None,
                 dm: Optional[int] = None, path: Optional[int] = None):
        super().__init__(message)
        self.message = message
        if kind is not None:
            self.kind = kind
        self.node = node
        self.dm = dm
        self.path = path

    def to_dict(self) -> Dict[str, Any]:
        """Stable error document: kind, message and whichever locations are known"""
        doc: Dict[str, Any] = {"kind": self.kind, "message": self.message}
        for field in ("node", "dm", "path"):
            value = getattr(self, field)
            if value is not None:
                doc[field] = value
        return doc


# Configuration / validation failures (exit code 2)

class ConfigurationError(LqTeamError):
    kind = "invalid_config"
    exit_code = 2


class ProblemValidationError(ConfigurationError):
    kind = "dimension_mismatch"


class UsageError(ConfigurationError):
    kind = "usage"


# Runtime failures (exit code 1)

class IntegrationDivergedError(LqTeamError):
    kind = "integration_diverged"


class InvalidCovarianceError(LqTeamError):
    kind = "invalid_covariance"


class SingularMatrixError(LqTeamError):
    kind = "singular_matrix"


class SingularInnerMatrixError(SingularMatrixError):
    kind = "singular_inner_matrix"


class SingularCouplingError(SingularMatrixError):
    kind = "singular_coupling"


class ConvergenceError(LqTeamError):
    """Fixed-point iteration stopped at max_iter without reaching tol"""

    kind = "non_convergence"

    def __init__(self, message: str, final_residual: float, iterations: int, **kwargs):
        super().__init__(message, **kwargs)
        self.final_residual = final_residual
        self.iterations = iterations

    def to_dict(self) -> Dict[str, Any]:
        doc = super().to_dict()
        doc["final_residual"] = self.final_residual
        doc["iterations"] = self.iterations
        return doc


class PreconditionError(LqTeamError):
    kind = "precondition"


class SimulationDivergedError(LqTeamError):
    kind = "blow_up"


class EmptyEnsembleError(LqTeamError):
    kind = "empty_ensemble"


class NonFiniteCostError(LqTeamError):
    kind = "non_finite_cost"


class OrderingViolationError(LqTeamError):
    kind = "ordering_violation"
