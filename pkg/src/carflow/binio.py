"""Error classes and a bounds-checked reader shared by the binary file formats."""
import struct


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class InconsistentSizeError(FormatError):
    """Header flags or sizes disagree with the payload."""


class ByteReader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def remaining(self):
        return len(self.data) - self.pos
