"""Exception types shared across the package.

Everything numeric raises one of these rather than a bare ValueError so
that the scenario runner can map failures to report entries and exit
codes without string matching.
"""


class ConormalError(Exception):
    """Base class for all package errors."""


class ExprError(ConormalError):
    """Base class for expression parsing and evaluation errors."""


class ParseError(ExprError):
    """Malformed expression text. Carries the 0-based offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class UnknownIdentifier(ExprError):
    """An identifier is neither a bound variable, a function, nor a constant."""


class DomainError(ExprError):
    """Evaluation left the domain of a primitive (log of a nonpositive
    number, division by zero, fractional power of a nonpositive base)."""


class DimensionMismatch(ConormalError):
    """Operands refer to spaces or grids of incompatible dimension."""


class RankDeficient(ConormalError):
    """A Jacobian or frame that must have full rank does not."""


class NewtonFailed(ConormalError):
    """A constrained Newton solve did not reach the requested residual."""


class CancellationFailed(ConormalError):
    """The middle-slot differential cancellation required for twisted
    composition fails at a sampled point."""


class FiberSolveFailed(ConormalError):
    """No intermediate point realizing a composition could be found."""


class NotHorizontal(ConormalError):
    """The pulled-back tautological form contracts nontrivially with a
    vertical direction; the input is not a twisted conormal bundle."""


class NotCritical(ConormalError):
    """A point handed to the Lagrangian embedding is not on the critical
    set of the generating function."""


class NotTransverse(ConormalError):
    """Half-density composition was requested at a point where the
    composition is not transverse."""


class DegenerateChoice(ConormalError):
    """Randomly drawn auxiliary vectors failed to span after retries."""


class FitFailed(ConormalError):
    """A leading-order fit did not converge to a stable coefficient."""


class GridMismatch(ConormalError):
    """Operator and argument (or two operators) live on incompatible grids."""


class QuadraturePanelOverflow(ConormalError):
    """The oscillation budget demands more quadrature panels than allowed.

    ``required`` carries the per-axis panel count that would be needed.
    """

    def __init__(self, message: str, required: int):
        super().__init__(message)
        self.required = required


class SchemaError(ConormalError):
    """A scenario file does not conform to the documented schema."""


class TaskError(ConormalError):
    """A scenario task failed to execute (as opposed to failing its checks)."""
