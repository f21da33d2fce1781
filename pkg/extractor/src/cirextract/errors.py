class ExtractorError(Exception):
    """Base class for extraction failures."""


class ConfigError(ExtractorError):
    """Bad extraction configuration or template."""


class TransportError(ExtractorError):
    """A language-model request failed (possibly transiently)."""


class BackendError(ExtractorError):
    """An encoder/captioner backend cannot run or was fed bad input."""
