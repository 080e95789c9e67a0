"""Typed engine errors.

The CLI prints ``type(exc).__name__`` on stderr, so class names are part of
the external contract.
"""


class ForkError(Exception):
    """Base class for every engine error."""


class OutOfBounds(ForkError):
    pass


class InvalidPath(ForkError):
    pass


class NotFound(ForkError):
    pass


class StorageFull(ForkError):
    pass


class UnknownSnapshot(ForkError):
    pass


class StateMismatch(ForkError):
    """A compensation guard (or node digest) did not match the live state."""


class RestoreMismatch(ForkError):
    """A restored state's digest differs from the one recorded at node creation."""


class IrreversiblePath(ForkError):
    """Backtracking would have to undo an edge that has no compensation."""


class UnknownNode(ForkError):
    pass


class NodeInUse(ForkError):
    pass


class NoCursor(ForkError):
    pass


class UncommittedFork(ForkError):
    pass


class EmptyCommit(ForkError):
    pass


class InsufficientPoints(ForkError):
    pass


class InvalidCommand(ForkError):
    pass


class StoreLocked(ForkError):
    pass
