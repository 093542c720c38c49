class KinefitError(Exception):
    """Base class of all errors raised by kinefit"""


class ModelParseError(KinefitError, ValueError):
    """A model file could not be parsed

    Parameters
    ----------
    message : str
        Description of the problem.
    line : int or None
        Line number in the model file, when known.
    field : str or None
        Dotted path of the offending field, when known.
    """

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append("line {}".format(line))
        if field is not None:
            where.append("field '{}'".format(field))
        if where:
            message = "{}: {}".format(", ".join(where), message)
        super(ModelParseError, self).__init__(message)


class ModelValidationError(KinefitError, ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super(ModelValidationError, self).__init__(
            "invalid model: {} ({} violation(s))".format(self.violations[0], len(self.violations)))


class DimensionError(KinefitError, ValueError):
    pass


class GeometryError(KinefitError, ValueError):
    pass


class BehindCameraError(GeometryError):
    pass


class DegenerateGeometryError(GeometryError):
    pass


class FilterError(KinefitError, ValueError):
    pass


class MissingDataError(KinefitError, ValueError):
    pass


class InsufficientMarkersError(KinefitError, ValueError):
    pass


class ExhaustionError(KinefitError, RuntimeError):
    pass


class ConvergenceError(KinefitError, RuntimeError):
    """A solver invariant broke, e.g. a non-finite or increasing cost"""


class FittingError(KinefitError, RuntimeError):
    """A frame-level failure inside a sequence solve"""

    def __init__(self, frame, cause):
        self.frame = frame
        self.cause = cause
        super(FittingError, self).__init__("frame {}: {}".format(frame, cause))


class GradientCheckError(KinefitError, RuntimeError):
    pass
