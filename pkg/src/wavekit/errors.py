"""Exception types shared across the package.

Two families matter to callers: `ValidationError` (bad inputs, caught before
any heavy computation starts) and `ConvergenceError` (a numerical routine
could not reach its tolerance). The CLI maps them to exit codes 1 and 2 and
prints the `code` prefix on stderr.
"""


class WavekitError(Exception):
    code = "E_ERROR"


class ValidationError(WavekitError):
    code = "E_VALIDATION"


class ConvergenceError(WavekitError):
    code = "E_CONVERGENCE"


class NonPositiveMass(ValidationError):
    pass


class NonPositiveWidth(ValidationError):
    pass


class FrameMismatch(ValidationError):
    pass


class UnsupportedUnitPair(ValidationError):
    pass


class NotNormalized(ValidationError):
    pass


class TooFewSamples(ValidationError):
    pass


class NegativeAmplitude(ValidationError):
    pass


class NonMonotoneGrid(ValidationError):
    pass


class MethodUnavailable(ValidationError):
    pass


class NotRestFrame(ValidationError):
    pass


class NonFiniteIntegrand(ConvergenceError):
    pass


class MaxSubdivisions(ConvergenceError):
    pass


class DivergentNorm(ConvergenceError):
    pass


class TailNotConverged(ConvergenceError):
    pass


class GridTooCoarse(ConvergenceError):
    pass
