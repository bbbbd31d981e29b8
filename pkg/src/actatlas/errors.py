"""Exception hierarchy shared across the package."""


class AtlasError(Exception):
    """Base class for all errors raised by this package."""


class BlobFormatError(AtlasError):
    """Malformed binary blob: bad magic, unknown version, truncation, bad dims."""

    def __init__(self, reason, detail=""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


class ManifestError(AtlasError):
    """A store or bundle manifest violates its schema or invariants."""


class LabelsRequiredError(AtlasError):
    """An operation needing labels/predictions ran on a store without them."""


class ConfigError(AtlasError):
    """Invalid run configuration (bad flags, missing layers, K < 1, ...)."""
