"""Exception types shared across the package."""


class ThinHomogError(Exception):
    """Base class for all package errors."""


class ExprError(ThinHomogError):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownIdentifierError(ExprError):
    def __init__(self, name, offset):
        super().__init__(f"unknown identifier {name!r} at offset {offset}")
        self.name = name
        self.offset = offset


class ArityError(ExprError):
    def __init__(self, name, got, offset):
        super().__init__(f"{name}() takes 1 argument, got {got} (offset {offset})")
        self.name = name
        self.offset = offset


class ExprDomainError(ExprError, ArithmeticError):
    """Evaluation left the domain of a primitive (sqrt of negative, x/0, ...)."""

    def __init__(self, message, subexpr):
        super().__init__(f"{message} in subexpression {subexpr}")
        self.subexpr = subexpr


class NonDifferentiableError(ExprError):
    pass


class HypothesisViolation(ThinHomogError):
    """A profile breaks the positivity/boundedness assumptions on b or G."""


class PeriodicityError(ThinHomogError):
    pass


class MeshQualityError(ThinHomogError):
    def __init__(self, message, worst_triangle=None, worst_angle=None):
        super().__init__(message)
        self.worst_triangle = worst_triangle
        self.worst_angle = worst_angle


class MeshBudgetError(ThinHomogError, MemoryError):
    pass


class ConvergenceError(ThinHomogError):
    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class ConfigError(ThinHomogError, ValueError):
    pass


class StageError(ThinHomogError):
    """A study pipeline stage failed; carries the stage name and epsilon."""

    def __init__(self, stage, epsilon, cause):
        where = f" (eps={epsilon!r})" if epsilon is not None else ""
        super().__init__(f"stage {stage!r} failed{where}: {cause}")
        self.stage = stage
        self.epsilon = epsilon


class CellSolveError(ThinHomogError):
    """A cell problem in a coefficient table failed; names the sample."""

    def __init__(self, index, x, cause):
        super().__init__(f"cell solve failed at sample {index} (x={x:g}): {cause}")
        self.index = index
        self.x = x
