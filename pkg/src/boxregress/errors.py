"""Shared exception types."""


class DataFormatError(Exception):
    """An input file is malformed; the message carries the location."""
