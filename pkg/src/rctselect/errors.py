"""Exception hierarchy shared across the package."""


class DataError(ValueError):
    """Input data violates a documented contract (bad CSV row, undersized arm, ...)."""


class NumericalError(ArithmeticError):
    """A computation is numerically undefined for the given input."""


class SingularDesignError(NumericalError):
    """The least-squares design matrix is rank deficient."""


class DegenerateTailError(NumericalError):
    """The Hill estimator is undefined (all top order statistics tie)."""


class EstimatorFailure(RuntimeError):
    """An estimator failed on a particular (rct, replicate) fold."""

    def __init__(self, rct_id: str, replicate: int, cause: Exception) -> None:
        super().__init__(f"rct {rct_id!r}, replicate {replicate}: {cause}")
        self.rct_id = rct_id
        self.replicate = replicate
        self.cause = cause
