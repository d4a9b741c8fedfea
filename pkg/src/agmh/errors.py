class AGMHError(Exception):
    pass


class DimensionError(AGMHError, ValueError):
    pass


class ArgumentError(AGMHError, ValueError):
    pass


class FormatError(AGMHError):
    """Malformed binary file. ``offset`` is the byte position where reading failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDivergedError(AGMHError):
    def __init__(self, iteration, epoch, loss):
        super().__init__(
            f"training diverged at iteration {iteration}, epoch {epoch}: loss={loss!r}"
        )
        self.iteration = iteration
        self.epoch = epoch
        self.loss = loss
