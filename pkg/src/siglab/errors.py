"""Exception types raised across siglab."""


class SiglabError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(SiglabError, ValueError):
    pass


class ZeroRow(SiglabError, ValueError):
    pass


class NotNormalized(SiglabError, ValueError):
    pass


class InvalidRatio(SiglabError, ValueError):
    pass


class IndivisibleBatch(SiglabError, ValueError):
    pass


class StaleCache(SiglabError, RuntimeError):
    pass


class OutOfVocab(SiglabError, IndexError):
    pass


class StepOutOfRange(SiglabError, ValueError):
    pass


class ConfigError(SiglabError, ValueError):
    """Bad or unknown configuration key; ``key`` names the offender."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
