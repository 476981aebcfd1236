"""Exception hierarchy.

Validation errors map to CLI exit code 2, numerical failures to 3.
"""


class VLMQError(Exception):
    exit_code = 1


class ValidationError(VLMQError, ValueError):
    exit_code = 2


class NumericalError(VLMQError, ArithmeticError):
    exit_code = 3


class ShapeMismatch(ValidationError):
    pass


class InvalidRatio(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class GroupParamsMissing(ValidationError):
    pass


class MissingCrossTerm(ValidationError):
    pass


class ContainerError(VLMQError, OSError):
    exit_code = 4


class NotPositiveDefinite(NumericalError):
    pass


class ZeroHessian(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass
