"""Exception hierarchy shared by every stage of the pipeline."""


class RLPlaceError(Exception):
    """Base class for all errors raised by rlplace."""


class ParameterError(RLPlaceError, ValueError):
    """Invalid argument value (zero counts, inverted extents, out-of-range M...)."""


class ValidationError(RLPlaceError, ValueError):
    """A loaded object violates one of its type invariants."""


class ParseError(RLPlaceError, ValueError):
    """A file could not be decoded."""


class VersionError(RLPlaceError, ValueError):
    """A file carries an unknown version tag."""


class FrameError(RLPlaceError, ValueError):
    """Point clouds expressed in mismatching coordinate frames."""


class ShapeError(RLPlaceError, ValueError):
    """Grid dimensions do not match or are too small."""


class ContractError(RLPlaceError, ValueError):
    """An input breaks an operation precondition (e.g. vehicle points in x-hat)."""


class DivergenceError(RLPlaceError, ArithmeticError):
    """Training produced a non-finite loss."""


class BudgetError(RLPlaceError, RuntimeError):
    """Brute-force enumeration would exceed the configured evaluation budget."""


class RLPlaceIOError(RLPlaceError, OSError):
    """Reading or writing an artifact failed."""
