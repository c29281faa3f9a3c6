"""Typed errors raised when decoding model files and compressed archives."""


class FormatError(ValueError):
    """Base class for malformed QNET/QNTC input."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class UnknownLayerKindError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class CorruptStreamError(FormatError):
    """A Huffman table, bitstream or index stream that cannot be decoded."""
