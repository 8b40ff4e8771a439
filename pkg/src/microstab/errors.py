"""Exception hierarchy shared by all solver layers."""


class MicrostabError(Exception):
    """Base class for all package errors."""


class InvalidDeformationError(MicrostabError):
    """Deformation gradient with non-positive determinant (or log of it)."""


class ContractViolation(MicrostabError):
    """An operation was called with inputs violating its preconditions."""


class OutOfRangeStrainError(MicrostabError):
    """A Green-Lagrange strain outside the admissible cone (2E + I not SPD)."""


class ResolutionError(MicrostabError):
    """Mesh subdivision too coarse to resolve a geometric feature."""


class InvalidSpecError(MicrostabError):
    """Inconsistent or degenerate geometric/scenario specification."""


class ConstraintGraphError(MicrostabError):
    """Cyclic or multi-level master-slave constraint chains."""


class RankDeficiencyError(MicrostabError):
    """Singular reduced operator (e.g. unconstrained rigid modes)."""


class ContinuationError(MicrostabError):
    """Newton continuation failed after exhausting step halving.

    Carries the last load factor that converged; failing to proceed past a
    load level is itself a (crude) instability indicator.
    """

    def __init__(self, message, last_good_t=None, states=None):
        super().__init__(message)
        self.last_good_t = last_good_t
        self.states = states if states is not None else []


class AtInstabilityError(MicrostabError):
    """Singular incremental RVE operator: homogenized tangent undefined."""


class NumericFailureError(MicrostabError):
    """Eigensolver or factorization did not converge."""


class NoInstabilityDetectedError(MicrostabError):
    """Sampled curve never develops the decreasing/saturating branch."""


class HullExceededError(MicrostabError):
    """Database query outside the sampled (theta, phi, t) hull."""

    def __init__(self, message, strain=None, element=None):
        super().__init__(message)
        self.strain = strain
        self.element = element


class CorruptDatabaseError(MicrostabError):
    """Database file failed framing or content-hash verification."""
