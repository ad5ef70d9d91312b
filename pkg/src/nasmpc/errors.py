"""Exception hierarchy shared across the package."""


class NasMpcError(Exception):
    """Base class for all errors raised by nasmpc."""


# -- model DSL ---------------------------------------------------------------

class ModelError(NasMpcError, ValueError):
    pass


class ModelSyntaxError(ModelError):
    def __init__(self, message, line, column):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class MandatoryStateMissing(ModelError):
    pass


class MandatoryInputMissing(ModelError):
    pass


class MissingDerivative(ModelError):
    def __init__(self, state):
        super().__init__(f"no derivative given for state '{state}'")
        self.state = state


class DuplicateDerivative(ModelError):
    def __init__(self, state):
        super().__init__(f"derivative of state '{state}' defined twice")
        self.state = state


class UnknownIdentifier(ModelError):
    def __init__(self, name, line=None, column=None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"unknown identifier '{name}'{where}")
        self.name = name


class NonFiniteResult(NasMpcError, ArithmeticError):
    pass


# -- integration -------------------------------------------------------------

class NonFiniteState(NasMpcError, ArithmeticError):
    pass


class NewtonDivergence(NasMpcError, ArithmeticError):
    pass


# -- reference ---------------------------------------------------------------

class TrajectoryError(NasMpcError, ValueError):
    pass


class BadSegmentCount(TrajectoryError):
    pass


class BadPtype(TrajectoryError):
    pass


class NegativeRefSpeed(TrajectoryError):
    pass


class NonFiniteField(TrajectoryError):
    pass


class NoMatch(NasMpcError, LookupError):
    """No segment with the requested driving mode inside the search window."""


# -- solver ------------------------------------------------------------------

class RankDeficientActiveSet(NasMpcError, ArithmeticError):
    pass


class CholeskyBreakdown(NasMpcError, ArithmeticError):
    pass


class NoDecrease(NasMpcError):
    pass
