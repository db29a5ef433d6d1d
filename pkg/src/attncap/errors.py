"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1, data and
file-format problems exit 2, numerical divergence exits 3.
"""


class AttncapError(Exception):
    """Base class for all package errors."""


class DimensionError(AttncapError, ValueError):
    """Tensor extents do not satisfy an operation's shape contract."""


class ContractError(AttncapError, ValueError):
    """A precondition on arguments or state was violated."""


class DomainError(AttncapError, ValueError):
    """An input lies outside a function's mathematical domain."""


class FormatError(AttncapError, ValueError):
    """A file does not follow its expected binary or text grammar."""


class UnsupportedVersionError(FormatError):
    """A checkpoint was written by an unknown format version."""


class DivergenceError(AttncapError, ArithmeticError):
    """Training produced a non-finite loss."""
