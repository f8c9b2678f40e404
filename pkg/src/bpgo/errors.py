"""Exception types raised across the package."""


class BpgoError(Exception):
    """Base class for all library errors."""


class InvalidReward(BpgoError, ValueError):
    pass


class GroupTooSmall(BpgoError, ValueError):
    pass


class InvalidRatio(BpgoError, ValueError):
    pass


class ShapeMismatch(BpgoError, ValueError):
    pass


class InvalidWeight(BpgoError, ValueError):
    pass


class InvalidAction(BpgoError, ValueError):
    pass


class MissingPriorContext(BpgoError, KeyError):
    pass


class ConfigError(BpgoError, ValueError):
    pass


class NonFiniteLoss(BpgoError, FloatingPointError):
    """A loss or gradient went non-finite during a training step."""

    def __init__(self, message: str, prompt_id=None):
        super().__init__(message)
        self.prompt_id = prompt_id
