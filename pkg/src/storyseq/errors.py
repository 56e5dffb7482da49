"""Exception hierarchy shared by every layer of the package."""


class StorySeqError(Exception):
    """Base class for all package errors."""


class DimensionError(StorySeqError, ValueError):
    pass


class ConfigError(StorySeqError, ValueError):
    pass


class EmptySequenceError(StorySeqError, ValueError):
    pass


class DegenerateBatchError(StorySeqError, ValueError):
    pass


class NonFiniteError(StorySeqError, FloatingPointError):
    pass


class DataContractError(StorySeqError, ValueError):
    pass


class AlignmentError(StorySeqError, KeyError):
    pass


class TokenIndexError(StorySeqError, IndexError):
    pass


class FeatureLookupError(StorySeqError, KeyError):
    pass


class FormatError(StorySeqError):
    """Malformed binary or text file.  ``offset`` is the byte offset (or line
    number for text formats) where parsing failed."""

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
