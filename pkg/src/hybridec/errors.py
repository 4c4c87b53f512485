"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: validation-type errors map to exit
code 2, identification failures to 3, anything else to 1.
"""

from __future__ import annotations


class HybridECError(Exception):
    """Base class for all package errors."""


class SchemaError(HybridECError):
    """A required column is missing or the schema document is malformed."""


class ParseError(HybridECError):
    """A cell could not be parsed; carries the offending row and column."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class DatasetValidationError(HybridECError):
    """Structural invariants of the observed data are violated."""

    def __init__(self, report):
        lines = "; ".join(v.message for v in report.violations)
        super().__init__(f"dataset validation failed: {lines}")
        self.report = report


class LearnerError(HybridECError):
    """Base class for model-fitting failures."""


class RankError(LearnerError):
    """Singular design matrix with no ridge penalty to rescue it."""


class DegenerateTargetError(LearnerError):
    """Binary classifier asked to fit a single-class target."""


class FoldDegenerateError(LearnerError):
    """Cross-fitting folds could not retain every (treatment, source) cell."""


class EstimationError(HybridECError):
    """An estimator's preconditions are not met (no treated rows, q=0, ...)."""


class NumericGuardError(HybridECError):
    """A denominator that truncation should have protected is non-positive."""


class InferenceError(HybridECError):
    """Unsupported inference method for the given estimate."""


class GraphError(HybridECError):
    """Base class for selection-diagram errors."""


class CycleError(GraphError):
    def __init__(self, cycle):
        super().__init__(f"graph contains a cycle: {' -> '.join(cycle)}")
        self.cycle = tuple(cycle)


class ConstructionError(GraphError):
    """Selection-node placement violates the diagram construction rule."""


class ArityError(GraphError):
    """Not exactly one treatment or one outcome node."""


class UnknownNodeError(GraphError):
    """A query referenced a node that is not in the graph."""


class SplitStateError(GraphError):
    """Node-split requested twice, or a query needs a split that never ran."""


class InvalidAdjustmentSetError(GraphError):
    """Adjustment set contains the outcome, treatment, or an unobserved node."""


class DiagnosticError(HybridECError):
    """A diagnostic is undefined for the given data (e.g. no externals)."""


class InsufficientOverlapError(DiagnosticError):
    """Too few propensity buckets contain controls from both sources."""


class HarnessError(HybridECError):
    """Simulation harness failure (too many broken replicates)."""
