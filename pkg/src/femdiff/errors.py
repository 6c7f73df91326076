"""Exception types shared across the package."""


class FemdiffError(Exception):
    """Base class for all femdiff errors."""


class EmptyDomain(FemdiffError):
    """A cell mask kept no triangles."""


class DisconnectedDomain(FemdiffError):
    """A cell mask split the domain into several edge-connected components."""


class InvalidHierarchy(FemdiffError):
    """Graph level sizes are not strictly decreasing."""


class NoEdges(FemdiffError):
    """An edge statistic was requested on a graph without edges."""


class ParseError(FemdiffError):
    """A mesh or observation file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GraphMismatch(FemdiffError):
    """A field was combined with a structure built on a different graph."""


class RadiusMismatch(FemdiffError):
    """Filter radius does not match the neighbor table it is applied with."""


class DegenerateTriangle(FemdiffError):
    """A triangle has (near-)zero area."""


class SingularSystem(FemdiffError):
    """A linear system factorization or solve failed."""


class NotPositiveDefinite(FemdiffError):
    """Covariance factorization failed even after jitter escalation."""


class NonFiniteState(FemdiffError):
    """A sampler state became non-finite."""

    def __init__(self, message: str, step=None):
        self.step = step
        super().__init__(message)


class NonFiniteLoss(FemdiffError):
    """Training loss became non-finite."""

    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"non-finite loss at iteration {iteration}")


class RejectionBudgetExceeded(FemdiffError):
    """Rejection sampling failed to place an inclusion inside the domain."""


class ConfigError(FemdiffError):
    """Configuration validation failed; lists every offending key."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
