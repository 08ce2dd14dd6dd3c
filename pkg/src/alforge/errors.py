"""Exception hierarchy with stable machine-parseable categories.

Every error raised by this package carries one of five category strings
(CONFIG, DATA, TRAIN, DIVERGE, POOL_EXHAUSTED) so scripts driving the CLI
can branch on the first line of stderr.
"""


class AlforgeError(Exception):
    """Base class; ``category`` is a stable string for scripting."""

    category = "DATA"


class ConfigError(AlforgeError):
    category = "CONFIG"


class DataError(AlforgeError):
    category = "DATA"


class TrainError(AlforgeError):
    category = "TRAIN"


class DivergenceError(TrainError):
    """Non-finite loss during training; carries the loss breakdown."""

    category = "DIVERGE"

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = dict(breakdown or {})


class PoolExhaustedError(AlforgeError):
    category = "POOL_EXHAUSTED"
