"""Exception hierarchy. Every error carries a stable class name used in CLI error JSON."""


class KnotsError(Exception):
    """Base class for all toolkit errors."""


class ParseError(KnotsError):
    pass


class UnsupportedDtype(KnotsError):
    pass


class CorruptFile(KnotsError):
    pass


class NonFiniteTensor(KnotsError):
    pass


class IncompleteAdapter(KnotsError):
    pass


class RankMismatch(KnotsError):
    pass


class ShapeError(KnotsError, ValueError):
    pass


class MissingKey(KnotsError, KeyError):
    def __str__(self) -> str:
        # KeyError quotes its argument; keep messages readable
        return str(self.args[0]) if self.args else ""


class EmptyInput(KnotsError, ValueError):
    pass


class InvalidProbability(KnotsError, ValueError):
    pass


class ConfigError(KnotsError, ValueError):
    pass


class DegenerateBatch(KnotsError, ValueError):
    pass


class DegenerateVector(KnotsError, ValueError):
    pass


class MissingProbe(KnotsError):
    pass


class DegenerateBaseline(KnotsError, ValueError):
    pass


class InvalidK(KnotsError, ValueError):
    pass


class LabelSpecError(KnotsError, ValueError):
    pass


class InvalidGrid(KnotsError, ValueError):
    pass
