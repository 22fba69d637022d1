from typing import Optional, Sequence


class CramerRaoError(Exception):
    """Base error. ``exit_code`` is what the CLI returns when it escapes."""

    exit_code = 1

    def __init__(self, message: str, exit_code: Optional[int] = None):
        super().__init__(message)
        if exit_code is not None:
            self.exit_code = exit_code


class SpecError(CramerRaoError):
    """Invalid model spec, flags or table file."""

    exit_code = 2


class ParameterDomainError(CramerRaoError):
    """A parameter point (or a finite-difference stencil) left the domain."""

    exit_code = 2


class DensityError(CramerRaoError):
    """Densities that are negative, zero where positivity is needed, or not normalized."""

    exit_code = 2


class ExprError(CramerRaoError):
    exit_code = 2

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} at offset {offset}"
        super().__init__(message)
        self.offset = offset


class ExprSyntaxError(ExprError):
    pass


class ExprDomainError(ExprError):
    """Evaluation fault such as log of a nonpositive number."""

    def __init__(self, message: str, subexpression: str):
        super().__init__(f"{message} in '{subexpression}'")
        self.subexpression = subexpression


class SingularInformation(CramerRaoError):
    """The Fisher information is singular or indefinite at ``point``."""

    exit_code = 3

    def __init__(self, message: str, point: Sequence[float]):
        formatted = ", ".join(f"{float(v):.17g}" for v in point)
        super().__init__(f"{message} at p=({formatted})")
        self.point = tuple(float(v) for v in point)


class BoundViolation(CramerRaoError):
    exit_code = 4
