"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so keep the split stable:
manifest problems, infeasible bit budgets, and numeric failures are
different user-facing situations.
"""


class BitAllocError(Exception):
    """Base class for all package errors."""


class ShapeError(BitAllocError):
    """Tensor or layer shapes are incompatible."""


class NumericError(BitAllocError):
    """Non-finite values or degenerate probabilities encountered."""


class InfeasibleError(BitAllocError):
    """The requested average bit-width cannot be met by any assignment."""


class ManifestError(BitAllocError):
    """A manifest field or a referenced data file is invalid."""


class BudgetError(BitAllocError):
    """An exact solver or oracle was asked to exceed its size guard."""
