"""Exception hierarchy shared by all loopclose modules."""


class LoopCloseError(Exception):
    """Base class for every error raised by this package."""


class InvalidPose(LoopCloseError, ValueError):
    pass


class TooFewPoses(LoopCloseError, ValueError):
    pass


class MaskMismatch(LoopCloseError, ValueError):
    pass


class PatchOutOfBounds(LoopCloseError, ValueError):
    pass


class IndexOrder(LoopCloseError, ValueError):
    pass


class EmptyFrame(LoopCloseError, ValueError):
    pass


class EmptySequence(LoopCloseError, ValueError):
    pass


class BadIndex(LoopCloseError, IndexError):
    pass


class Disconnected(LoopCloseError, ValueError):
    pass


class BadInformation(LoopCloseError, ValueError):
    pass


class Diverged(LoopCloseError, ArithmeticError):
    pass


class SpecError(LoopCloseError, ValueError):
    pass


class LengthMismatch(LoopCloseError, ValueError):
    pass


class TooShort(LoopCloseError, ValueError):
    pass


class UnsupportedFormat(LoopCloseError, ValueError):
    pass


class EmptyFile(LoopCloseError, ValueError):
    pass


class ParseError(LoopCloseError, ValueError):
    """Malformed input. ``line`` is 1-based; 0 means the location is a byte offset or unknown."""

    def __init__(self, message, line=0):
        self.line = line
        self.message = message
        super().__init__(f"line {line}: {message}" if line else message)
