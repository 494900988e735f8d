"""Exception taxonomy shared across the package."""


class HybridlapError(Exception):
    """Base class for package errors."""


class DomainError(HybridlapError):
    """A map or model was queried outside its declared operating box."""


class IntegrationError(HybridlapError):
    """A state left its admissible region during forward integration."""


class SpecError(HybridlapError):
    """Inconsistent construction input (track geometry, config schema, ...)."""


class LayoutError(HybridlapError):
    """Dimension or block-layout mismatch while building an NLP."""


class MaxIterations(HybridlapError):
    """Iteration cap reached before the convergence test passed."""


class QpFailure(HybridlapError):
    """The QP subproblem solver failed (singular KKT, pivot cap)."""


class NodeInfeasible(HybridlapError):
    """A supervisor table node has no feasible actuator triple."""


class NoFeasibleCylinders(HybridlapError):
    """No cylinder count can realise the commanded fuel power."""


class SolveFailed(HybridlapError):
    """An online solve did not converge; carries the solve report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class Infeasible(HybridlapError):
    """Problem proven infeasible (targets outside the reachable set)."""


class RunAborted(HybridlapError):
    """Closed-loop run aborted (state left the admissible region)."""
