"""Exception hierarchy for the package."""


class CsmcError(Exception):
    """Base class for all errors raised by condsmc."""


class ModelError(CsmcError, ValueError):
    pass


class NonStochastic(ModelError):
    pass


class NegativePotential(ModelError):
    pass


class DegeneratePotential(ModelError):
    pass


class DimensionMismatch(ModelError):
    pass


class NonFinite(ModelError):
    pass


class TooLarge(CsmcError):
    """Exact enumeration would exceed the table-size cap."""


class ZeroNormalizer(CsmcError, ArithmeticError):
    pass


class ZeroWeightVector(CsmcError, ArithmeticError):
    """All selection weights are zero."""


class IndexOutOfRange(CsmcError, IndexError):
    pass


class OracleRequired(CsmcError):
    pass


class ConfigError(CsmcError):
    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)
