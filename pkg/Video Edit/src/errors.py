#!/usr/bin/env python3
"""
Error hierarchy for the video edit package
Core modules raise these; the CLI maps them to exit codes
"""


class VideoEditError(Exception):
    """Base class for every error raised on purpose by this package"""


class ParameterError(VideoEditError, ValueError):
    """An argument is outside its documented range"""


class ShapeError(VideoEditError, ValueError):
    """Array shapes (or channel widths) do not line up"""


class StateError(VideoEditError, RuntimeError):
    """Mutable pipeline state is missing or was used out of order"""


class UnsupportedConfigurationError(VideoEditError):
    """The combination of settings is valid on its own but not supported here"""


class ConfigError(VideoEditError):
    """Run configuration or on-disk inputs are invalid"""


class SpecError(ParameterError):
    """A synthetic scene description cannot be rendered"""


class ArchiveFormatError(VideoEditError):
    """A binary array file has a bad magic, header or payload"""
