"""Exception taxonomy shared across the package.

Every failure mode that callers are expected to branch on gets its own class,
and the command line layer maps each class to a distinct exit code.
"""


class FbsdeLabError(Exception):
    """Base class for all package errors."""


class ConfigError(FbsdeLabError):
    """Invalid configuration: bad schema, bad value, or an a-priori stability
    violation (e.g. the advective CFL bound) detected before any computation."""


class EvaluationError(FbsdeLabError):
    """A coefficient map returned a non-finite value.  Carries the offending
    input so the caller can reproduce the evaluation."""

    def __init__(self, message, offending_input=None):
        super().__init__(message)
        self.offending_input = offending_input


class IterationError(FbsdeLabError):
    """A fixed-point iteration (Picard freezing inside the field solver)
    exhausted its budget.  Carries the last residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ShootingError(FbsdeLabError):
    """Newton shooting for the two-point boundary problem failed to drive the
    terminal mismatch below tolerance.  Carries the best residual seen."""

    def __init__(self, message, best_residual=None):
        super().__init__(message)
        self.best_residual = best_residual


class ContractionError(FbsdeLabError):
    """The alternating forward/backward sweep is not contracting (residual grew
    for three consecutive sweeps, or the sweep budget ran out)."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals) if residuals is not None else None


class DivergenceError(FbsdeLabError):
    """A simulated or integrated state became non-finite."""


class ExcursionError(FbsdeLabError):
    """A simulated path left the safe evaluation region of the field.
    Identifies the path and the step so the caller can enlarge the box."""

    def __init__(self, message, path_index=None, step_index=None):
        super().__init__(message)
        self.path_index = path_index
        self.step_index = step_index


class CouplingError(FbsdeLabError):
    """Two ensembles that must share a Brownian stream do not."""


class ShapeError(FbsdeLabError):
    """Array arguments that must live on a common grid do not."""


class BranchError(FbsdeLabError):
    """Pointwise inversion of the field found more preimage branches than the
    supported cap."""


class EmptyEstimateError(FbsdeLabError):
    """A rare-event sweep produced zero hits at every noise level; enlarge the
    tube radius or enable tilting."""


#: Exit code per error class for the command line front end.  0 is success,
#: 1 is an unexpected internal failure.
EXIT_CODES = {
    ConfigError: 2,
    EvaluationError: 3,
    IterationError: 4,
    ShootingError: 5,
    ContractionError: 6,
    DivergenceError: 7,
    ExcursionError: 8,
    CouplingError: 9,
    ShapeError: 10,
    BranchError: 11,
    EmptyEstimateError: 12,
    ValueError: 13,
}

#: Exit code used when a run completes but a requested assertion fails.
EXIT_ASSERTION_FAILED = 14


def exit_code_for(exc):
    for klass, code in EXIT_CODES.items():
        if isinstance(exc, klass):
            return code
    return 1
