"""Exception hierarchy shared by every ngcg module."""


class NGCGError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(NGCGError, ValueError):
    """Operand shapes do not conform."""


class NumericError(NGCGError, ArithmeticError):
    """A non-finite value tried to enter a computation graph."""


class ContractError(NGCGError, ValueError):
    """A call violated a documented precondition."""


class VocabularyError(NGCGError, ValueError):
    pass


class LengthError(NGCGError, ValueError):
    pass


class EmptySequenceError(NGCGError, ValueError):
    """Pooling was asked to aggregate zero valid positions."""


class DegenerateEmbeddingError(NGCGError, ArithmeticError):
    """A pooled vector had zero norm and cannot be normalized."""


class RankError(NGCGError, ValueError):
    pass


class NormalizationError(NGCGError, ValueError):
    """Embeddings expected to be unit-norm were not."""


class EmptyBatchError(NGCGError, ValueError):
    pass


class DataError(NGCGError, ValueError):
    pass


class DivergenceError(NGCGError, RuntimeError):
    """Training produced a non-finite loss."""


class IdentityError(NGCGError, ValueError):
    """Duplicate identifiers in an index."""


class GroundTruthError(NGCGError, ValueError):
    pass


class ConfigError(NGCGError, ValueError):
    pass


class FormatError(NGCGError, ValueError):
    """A binary or text file does not match its expected layout."""
