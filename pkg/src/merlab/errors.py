"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """Argument shapes, labels or specs do not match what an operation needs."""


class InvalidSpecError(ValueError):
    """A stream or network spec violates its own invariants."""


class FormatError(ValueError):
    """A data file does not follow the expected binary layout."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class StateError(RuntimeError):
    """An object was queried before it held the data the query needs."""


class ConfigError(ValueError):
    """Bad experiment configuration (unknown key, wrong type)."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
