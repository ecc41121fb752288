"""Error types raised by the export tool."""


class CorpusError(Exception):
    """The corpus file is malformed or internally inconsistent."""


class ExportError(Exception):
    """An export operation could not produce a valid output file."""
