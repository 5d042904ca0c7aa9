"""Exception types raised across the package."""


class FlexMergeError(Exception):
    """Base class for all package errors."""


class InvalidInput(FlexMergeError, ValueError):
    pass


class SingularMarkupSystem(FlexMergeError):
    """The stacked first-order-condition matrix could not be inverted."""

    def __init__(self, message, market_id=None):
        super().__init__(message if market_id is None else f"market {market_id}: {message}")
        self.market_id = market_id


class NonConvergence(FlexMergeError):
    def __init__(self, message, residual=float("nan"), markets=()):
        super().__init__(message)
        self.residual = residual
        self.markets = list(markets)


class EncodingError(FlexMergeError, ValueError):
    pass


class GenerationFailure(FlexMergeError):
    def __init__(self, message, markets=()):
        super().__init__(message)
        self.markets = list(markets)


class StratificationError(FlexMergeError):
    pass


class MergerScopeError(FlexMergeError):
    pass


class RankDeficientDesign(FlexMergeError):
    pass


class TrainingDiverged(FlexMergeError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class PermutationBudgetExceeded(FlexMergeError):
    pass


class NegativeVarianceClipped(UserWarning):
    """Attained variance-program value was negative and has been clipped to zero."""
