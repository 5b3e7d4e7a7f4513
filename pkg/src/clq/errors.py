"""Exception hierarchy shared by the solver modules."""


class ClqError(Exception):
    """Base class for all solver errors."""


class Infeasible(ClqError):
    """The constraint polyhedron has no point."""


class NotPositiveDefinite(ClqError):
    """The quadratic form of a QP failed the positive-definiteness check."""

    def __init__(self, min_eig: float, msg: str = ""):
        self.min_eig = min_eig
        super().__init__(msg or f"quadratic form not positive definite (min eigenvalue {min_eig:.3e})")


class MaxIterations(ClqError):
    """An iterative method hit its iteration cap."""


class BlowUp(ClqError):
    """A Riccati trajectory exceeded the blow-up threshold."""

    def __init__(self, t: float, value: float):
        self.t = t
        self.value = value
        super().__init__(f"|G| = {value:.3e} exceeded blow-up threshold at t = {t:.6g}")


class SingularMatrix(ClqError):
    """A matrix that must be inverted is singular."""


class OutOfHorizon(ClqError):
    """A time argument lies outside [0, T]."""


class InvalidMarket(ClqError):
    """Market data violate a mean-variance modelling assumption."""

    def __init__(self, reason: str, assumption: str = ""):
        self.reason = reason
        self.assumption = assumption
        super().__init__(reason)


class DegenerateMultiplier(ClqError):
    """1 - Gbar(0) rho(0)^2 vanished, so the Lagrange multiplier is undefined."""


class ParseError(ClqError):
    """A config file is not valid JSON."""

    def __init__(self, msg: str, line: int = 0, column: int = 0):
        self.message = msg
        self.line = line
        self.column = column
        super().__init__(f"{msg} (line {line}, column {column})")


class ValidationError(ClqError):
    """A config parsed but violates a schema rule or a modelling assumption."""

    def __init__(self, msg: str, assumption: str = "", index: int | None = None):
        self.message = msg
        self.assumption = assumption
        self.index = index
        where = f" at grid point {index}" if index is not None else ""
        tag = f"[{assumption}] " if assumption else ""
        super().__init__(f"{tag}{msg}{where}")
