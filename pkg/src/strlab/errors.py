"""Exception types shared across the package."""


class StrLabError(Exception):
    """Base class for all errors raised by strlab."""


class ShapeMismatch(StrLabError):
    pass


class NotScalar(StrLabError):
    pass


class DetachedGraph(StrLabError):
    pass


class NonFiniteValue(StrLabError):
    """An op produced NaN or Inf; the graph is in an error state."""


class TargetTooLong(StrLabError):
    pass


class BlankInTarget(StrLabError):
    pass


class VocabMismatch(StrLabError):
    pass


class TooLarge(StrLabError):
    pass


class BadConfig(StrLabError):
    pass


class AlreadyAttached(StrLabError):
    pass


class ArchMismatch(StrLabError):
    pass


class BadMagic(StrLabError):
    pass


class HashMismatch(StrLabError):
    pass


class InvalidEncoding(StrLabError):
    pass


class OovCodepoint(StrLabError):
    pass


class EmptyCorpus(StrLabError):
    pass


class BadOrder(StrLabError):
    pass


class MissingGlyph(StrLabError):
    pass


class EmptyLexicon(StrLabError):
    pass


class EmptySet(StrLabError):
    pass
