"""Exception types shared across the simulator."""


class ConfigurationError(ValueError):
    """Invalid model, dataset or experiment configuration.

    ``path`` names the offending config field (dotted), when known.
    """

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class UsageError(ValueError):
    """An operation was called with arguments violating its contract."""


class ShapeError(UsageError):
    """Two parameter-shaped operands do not line up."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, round_index, message="non-finite loss"):
        self.round_index = round_index
        super().__init__(f"round {round_index}: {message}")
