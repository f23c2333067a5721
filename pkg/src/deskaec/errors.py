"""Exception types raised across the toolkit."""


class AECError(Exception):
    """Base class for all toolkit errors."""


class ShortInput(AECError, ValueError):
    pass


class NoSignal(AECError, ValueError):
    pass


class BadLag(AECError, ValueError):
    pass


class RateMismatch(AECError, ValueError):
    pass


class ShapeMismatch(AECError, ValueError):
    pass


class Infeasible(AECError, ValueError):
    pass


class MissingStems(AECError, ValueError):
    pass


class LatentMismatch(AECError, ValueError):
    pass


class ConfigError(AECError, ValueError):
    pass


class CorruptCheckpoint(AECError, IOError):
    pass


class MissingArtifact(AECError, FileNotFoundError):
    pass


class Undefined(AECError, ValueError):
    """A metric has no support on the given input (e.g. no echo-only region)."""


class Diverged(AECError, RuntimeError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"loss became non-finite at step {step}")
