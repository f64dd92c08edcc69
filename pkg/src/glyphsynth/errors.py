"""Exception types shared across the package."""


class GlyphSynthError(Exception):
    """Base class for all package errors."""


class UnsupportedGlyph(GlyphSynthError):
    def __init__(self, char: str):
        super().__init__(f"character {char!r} is not in the glyph atlas")
        self.char = char


class DegenerateRegion(GlyphSynthError):
    pass


class ShapeError(GlyphSynthError):
    pass


class ConstraintError(GlyphSynthError):
    pass


class MalformedRecord(GlyphSynthError):
    pass


class TimestepError(GlyphSynthError):
    pass


class PartitionError(GlyphSynthError):
    pass


class DivergenceError(GlyphSynthError):
    def __init__(self, message: str, step: int | None = None, last_good: str | None = None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good


class PrerequisiteError(GlyphSynthError):
    pass


class ConfigError(GlyphSynthError, ValueError):
    """Invalid configuration values; also a ``ValueError``."""


class EmptyReport(GlyphSynthError):
    pass
