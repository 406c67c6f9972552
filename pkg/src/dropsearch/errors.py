"""Exception types shared across the package."""


class DropSearchError(Exception):
    """Base class for all package errors."""


class ContractError(DropSearchError, ValueError):
    """A caller violated an operation's precondition."""


class ShapeError(ContractError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class NumericalFault(DropSearchError, FloatingPointError):
    """A kernel op produced NaN or Inf."""


class EvaluationFailed(DropSearchError):
    """A reward evaluator could not produce a finite perf."""


class SearchAborted(DropSearchError):
    """The search stopped because too many evaluations failed."""
