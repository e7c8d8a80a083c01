"""Exception types shared across the package.

Every error raised on a documented failure path derives from FticirError so
the CLI and the service can map them to a single-line message / HTTP status
without pattern-matching on stdlib exceptions.
"""


class FticirError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(FticirError):
    """Invalid configuration value or malformed config file."""


class InputError(FticirError):
    """Malformed runtime input (undecodable image, bad token sequence...)."""


class CaptionNotFoundError(FticirError):
    """An image id has no caption in the caption source."""

    def __init__(self, image_id: str):
        super().__init__(f"no caption for image id {image_id!r}")
        self.image_id = image_id


class DataError(FticirError):
    """Dataset-level inconsistency (missing ids, bad records, empty sets)."""


class FormatError(FticirError):
    """A persisted artifact (index, checkpoint) is malformed or unsupported."""
