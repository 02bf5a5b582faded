"""Exception hierarchy shared across the package."""


class XtkdError(Exception):
    """Base class for every error raised by xtkd."""


class ShapeError(XtkdError, ValueError):
    """Operand shapes do not compose."""


class DomainError(XtkdError, ValueError):
    """Input lies outside the mathematical domain of an operation."""


class ContractError(XtkdError, ValueError):
    """A documented precondition was violated."""


class BoundsError(XtkdError, IndexError):
    """An index or rank argument is out of range."""


class MissingInputError(XtkdError, KeyError):
    """A graph leaf was not bound before the forward pass."""


class FrozenError(XtkdError, RuntimeError):
    """Attempted to update the parameters of a frozen network."""


class DegeneracyError(XtkdError, ArithmeticError):
    """Singular-value gap too small for a stable subspace split."""


class NumericError(XtkdError, ArithmeticError):
    """Non-finite value where a finite one is required."""


class ConfigError(XtkdError, ValueError):
    """Experiment configuration is malformed or violates an invariant."""
