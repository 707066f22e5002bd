"""Exception hierarchy.

Each error carries the CLI exit code of its family: 2 for validation,
3 for I/O and format problems, 4 for numeric failures.
"""


class AffsegError(Exception):
    exit_code = 2


class ValidationError(AffsegError):
    exit_code = 2


class FormatError(AffsegError):
    exit_code = 3


class NumericError(AffsegError):
    exit_code = 4


# tensor_io
class BadMagic(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class RankOutOfRange(ValidationError):
    pass


class IoFailure(FormatError):
    pass


class BadHeader(FormatError):
    pass


class UnsupportedMaxval(FormatError):
    pass


class ConfigError(ValidationError):
    pass


# seed_maps
class DimMismatch(ValidationError):
    pass


class AlphaOutOfRange(ValidationError):
    pass


class AlphaOrderViolation(ValidationError):
    pass


# affinity_learn
class NonFiniteParameters(NumericError):
    pass


class IndexOutOfRange(ValidationError):
    pass


class EmptyCorpus(ValidationError):
    pass


class NoPairsMined(ValidationError):
    pass


# diffusion
class ZeroRowSum(NumericError):
    pass


class NotPowerOfTwo(ValidationError):
    pass


# synthesis_eval
class SpecInfeasible(ValidationError):
    pass
