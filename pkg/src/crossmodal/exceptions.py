"""Exception hierarchy shared by all modules.

Every error raised on bad *data* derives from :class:`DataError`, which the
CLI maps to exit code 2.
"""


class DataError(ValueError):
    """Base class for invalid or unusable input data."""


# notes_io

class MalformedLine(DataError):
    def __init__(self, line_number, reason=""):
        self.line_number = line_number
        msg = f"malformed note line {line_number}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class MidiError(DataError):
    pass


class BadHeader(MidiError):
    pass


class TruncatedChunk(MidiError):
    pass


class UnsupportedFormat(MidiError):
    def __init__(self, fmt):
        self.format = fmt
        super().__init__(f"unsupported MIDI file format {fmt}")


class DanglingNoteOn(UserWarning):
    """Issued when a note-on has no matching note-off before end of track."""

    def __init__(self, pitch):
        self.pitch = pitch
        super().__init__(f"note-on for pitch {pitch} closed at end of track")


class PitchOutOfRange(DataError):
    pass


class NonPositiveFactor(DataError):
    pass


class EmptySequence(DataError):
    pass


# synth / chroma

class InvalidRate(DataError):
    pass


class BufferTooShort(DataError):
    pass


# matching

class EmptyInput(DataError):
    pass


class QueryTooShort(DataError):
    pass


# fingerprint

class TooFewEvents(DataError):
    pass


class EmptyIndex(DataError):
    pass


class IndexFormatError(DataError):
    pass


# follower

class PositionOutOfRange(DataError):
    pass


class NotInitialized(RuntimeError):
    pass


# embedding

class EmptyWindow(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class BatchTooSmall(DataError):
    pass


class DatasetTooSmall(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class EmptyList(DataError):
    pass


class ModelFormatError(DataError):
    pass
