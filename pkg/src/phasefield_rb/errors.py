"""Exception hierarchy shared by all modules."""


class PhasefieldRBError(Exception):
    """Base class for errors raised by this package."""


class ParameterError(PhasefieldRBError, ValueError):
    """An argument lies outside its admissible range."""


class RefinementRequiredError(PhasefieldRBError):
    """The mesh is too coarse to resolve the diffuse interface."""


class AssemblyError(PhasefieldRBError):
    """Inconsistent dimensions handed to an assembly routine."""


class ConfigurationError(PhasefieldRBError):
    """A problem set-up cannot produce a well-posed system."""


class NumericsError(PhasefieldRBError):
    """A factorization or linear solve broke down."""


class MeasurementError(PhasefieldRBError, ValueError):
    """Measurement data cannot be used (e.g. zero outflow in a relative error)."""


class FormatError(PhasefieldRBError):
    """A file does not follow the expected container layout or fails its checksum."""
