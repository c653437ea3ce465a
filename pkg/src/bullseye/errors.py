class BullseyeError(Exception):
    pass


class InputError(BullseyeError, ValueError):
    """Malformed argument: wrong shape, empty collection, out-of-range value."""


class ConfigurationError(BullseyeError):
    """Unknown layer tag, architecture, or inconsistent attack configuration."""


class DegenerateEmbeddingError(BullseyeError, ArithmeticError):
    """A target embedding has zero norm, so the normalized losses are undefined."""


class TrainingDivergenceError(BullseyeError, ArithmeticError):
    def __init__(self, epoch, loss):
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class OracleScopeError(BullseyeError):
    pass


class ManifestError(BullseyeError):
    def __init__(self, problems):
        self.problems = list(problems)
        lines = "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(f"manifest is invalid:\n{lines}")


class NoDataError(BullseyeError):
    pass
