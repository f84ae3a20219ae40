"""Exception types shared across the package."""


class AnisoStokesError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(AnisoStokesError, ValueError):
    pass


class UnsupportedCutError(AnisoStokesError):
    """The boundary cuts a patch in a way the subdivision cannot represent."""


class DegenerateCellError(AnisoStokesError):
    pass


class InvertedCellError(AnisoStokesError):
    pass


class OutOfDomainError(AnisoStokesError):
    pass


class SingularMatrixError(AnisoStokesError):
    """Factorisation broke down or the computed residual is not acceptable."""
