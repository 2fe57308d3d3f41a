"""Exception types shared across the package."""


class HvrError(Exception):
    """Base class for all hvr errors."""


class ConfigurationError(HvrError):
    """Invalid parameters or non-coercive coefficient data."""


class UnsupportedLawError(HvrError):
    """Operation not defined for this field law."""


class AssemblyError(HvrError):
    """Element coefficient data unusable for stiffness assembly."""


class ConsistencyError(HvrError):
    """Right-hand side not orthogonal to the constant kernel."""


class SolverError(HvrError):
    """Iterative solve failed to reach the requested residual."""


class SelfCheckError(HvrError):
    """A standing internal identity check failed."""


class EstimationError(HvrError):
    """A Monte Carlo run aborted; message names the failing realization."""
