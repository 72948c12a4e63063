"""Exception hierarchy shared across the package."""


class AclabError(Exception):
    """Base class for all package errors."""


class InvalidInputError(AclabError, ValueError):
    pass


class PotentialError(AclabError, ValueError):
    """A user potential failed the double-well validation scan."""


class QuadratureError(AclabError, ArithmeticError):
    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class SolverError(AclabError, RuntimeError):
    def __init__(self, message, history=None, field=None):
        super().__init__(message)
        self.history = list(history or [])
        self.field = field


class SolverDivergence(SolverError):
    pass


class SolverTimeout(SolverError):
    """Iteration budget exhausted; ``field`` holds the best iterate."""


class QualitativeFailure(SolverError):
    pass


class ConfigurationError(AclabError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class GeometryError(AclabError, ValueError):
    pass


class InsufficientDataError(AclabError, ValueError):
    pass


class ClusteringError(AclabError, ValueError):
    pass


class StructuralError(AclabError, ValueError):
    pass


class StructuralWarning(UserWarning):
    pass
