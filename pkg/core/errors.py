"""
Error Types
One exception hierarchy for the model, data and CLI layers
"""


class TrackDiffError(Exception):
    """Base class for every error raised by this project"""


class ShapeError(TrackDiffError):
    """Tensor extents do not fit the operation"""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class ContractError(TrackDiffError):
    """A precondition of an operation was violated"""


class CapacityError(TrackDiffError):
    """More instances (or a larger slot) than the configured k_max"""


class ConfigError(TrackDiffError):
    """Invalid or unknown configuration"""


class CategoryIndexError(TrackDiffError, IndexError):
    """Category id outside the category table"""


class StepIndexError(TrackDiffError, IndexError):
    """Diffusion step outside the noise schedule"""


class NumericError(TrackDiffError):
    """Non-finite values where finite ones are required (e.g. NaN loss)"""


class AnnotationError(TrackDiffError):
    """
    Rejected annotation document

    Attributes:
        code: Diagnostic code ('syntax', 'box_order', 'out_of_range', ...)
        line, column: Source position for syntax errors, else None
    """

    def __init__(self, code, message, line=None, column=None):
        self.code = code
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"[{code}] {message}{where}")
