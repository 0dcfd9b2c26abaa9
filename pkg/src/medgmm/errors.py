"""Exception hierarchy.

The CLI maps these onto its exit codes: ``DataError`` -> 2,
``IdentificationError`` -> 3, ``EstimationError`` -> 4.
"""


class MedGMMError(Exception):
    """Base class for all package errors."""


class DataError(MedGMMError, ValueError):
    """Input table is unusable (missing column, bad cell, empty, ...)."""


class IdentificationError(MedGMMError):
    """The rank condition for the outcome parameters fails empirically.

    ``report`` holds an :class:`~medgmm.diagnostics.IdentificationReport`
    when one could be computed.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConstantExposureError(IdentificationError, DataError):
    """Exposure has no variation, so Var(A|X) = 0 everywhere."""


class EstimationError(MedGMMError):
    """A numerical fit failed."""


class ConvergenceError(EstimationError):
    pass


class SeparationError(EstimationError):
    pass


class RankDeficiencyError(EstimationError):
    pass
