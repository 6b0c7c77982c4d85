"""Exception hierarchy shared across the package."""


class DatarError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(DatarError, ValueError):
    pass


class BadGroups(DatarError, ValueError):
    pass


class NonFiniteInput(DatarError, FloatingPointError):
    pass


class NonFiniteActivation(DatarError, FloatingPointError):
    pass


class NonFiniteCoord(DatarError, FloatingPointError):
    pass


class NotScalar(DatarError, ValueError):
    pass


class DetachedGraph(DatarError, RuntimeError):
    pass


class BadFactor(DatarError, ValueError):
    pass


class BadScale(DatarError, ValueError):
    pass


class BadConfig(DatarError, ValueError):
    """Invalid configuration key or value."""


class ConfigMismatch(DatarError, ValueError):
    """Configuration is inconsistent with the data or checkpoint it is used with."""


class TooShort(DatarError, ValueError):
    pass


class BadMagic(DatarError, ValueError):
    pass


class TruncatedFile(DatarError, ValueError):
    pass


class BadLabel(DatarError, ValueError):
    pass


class BadSpec(DatarError, ValueError):
    pass


class DataEmpty(DatarError, ValueError):
    pass
