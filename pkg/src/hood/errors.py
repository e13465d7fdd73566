class FileFormatError(ValueError):
    """Binary file has the wrong magic bytes or a malformed header."""


class VersionMismatchError(FileFormatError):
    """Binary file was written with an unsupported format version."""


class TruncatedFileError(FileFormatError):
    """Binary file ended before all declared records were read."""
