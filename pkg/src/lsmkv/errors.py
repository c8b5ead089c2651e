"""Exception hierarchy shared by every module."""


class LsmError(Exception):
    """Base class for all engine errors."""


class InvalidKey(LsmError, ValueError):
    pass


class UnsortedInput(LsmError, ValueError):
    pass


class EmptyInput(LsmError, ValueError):
    pass


class UnsortedSource(UnsortedInput):
    pass


class IoError(LsmError, OSError):
    pass


class CapacityExceeded(IoError):
    pass


class UnknownObject(IoError, KeyError):
    pass


class OutOfBounds(IoError, IndexError):
    pass


class CorruptSst(IoError):
    pass


class CorruptManifest(LsmError):
    pass


class EngineClosed(LsmError):
    pass


class L0Full(LsmError):
    pass


class NoGoodVssts(LsmError):
    """No Good vSST was available when L1 needed to release space."""


class EmptyHistogram(LsmError, ValueError):
    pass


class Deadlock(LsmError, RuntimeError):
    """The simulated timeline ran dry while a caller was still blocked."""


class ConfigError(LsmError, ValueError):
    pass


class InvariantViolation(LsmError, AssertionError):
    """A structural invariant check failed (debug mode)."""
