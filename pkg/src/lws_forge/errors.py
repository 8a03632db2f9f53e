"""Exception types shared across lws_forge."""


class LWSError(Exception):
    """Base class for all lws_forge errors."""


class InvalidArgumentError(LWSError, ValueError):
    pass


class InvalidInputError(LWSError, ValueError):
    """Raised when model inputs (e.g. token ids) fall outside the valid range."""


class InfeasibleBudgetError(LWSError):
    """No FFN scale in the search range reaches the requested parameter budget."""

    def __init__(self, message: str, best_count: int, best_scale: float):
        super().__init__(f"{message} (best achieved {best_count:,} params at scale {best_scale:.4f})")
        self.best_count = best_count
        self.best_scale = best_scale


class TrainingDivergenceError(LWSError):
    """Non-finite loss or gradients during training.

    ``metrics`` carries the rows logged before divergence, when available.
    """

    def __init__(self, message: str, metrics=None):
        super().__init__(message)
        self.metrics = metrics


class InsufficientDataError(LWSError):
    pass


class InvalidExperimentError(LWSError):
    pass
