"""Exception types raised across the package."""


class FuzzyAlignError(Exception):
    """Base class for all package errors."""


class ZeroNorm(FuzzyAlignError, ValueError):
    """A vector whose L2 norm is below the degeneracy threshold was used in a cosine."""


class ShapeMismatch(FuzzyAlignError, ValueError):
    pass


class NoPositive(FuzzyAlignError, ValueError):
    """Some row of the identity matrix has no positive match in the batch."""


class MissingGround(FuzzyAlignError, ValueError):
    pass


class NonDeterministic(FuzzyAlignError, RuntimeError):
    """Two forward evaluations of the same loss disagreed."""


class OrphanQuery(FuzzyAlignError, ValueError):
    """A query identity does not occur anywhere in the gallery."""


class CorruptFile(FuzzyAlignError, ValueError):
    pass


class ConfigInvalid(FuzzyAlignError, ValueError):
    def __init__(self, field, message):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")


class Diverged(FuzzyAlignError, RuntimeError):
    def __init__(self, step, last_finite_step):
        self.step = step
        self.last_finite_step = last_finite_step
        super().__init__(
            f"loss became non-finite at step {step} (last finite step: {last_finite_step})"
        )
