class TextCFError(Exception):
    """Base class for toolkit errors."""


class InvalidInputError(TextCFError, ValueError):
    pass


class GatewayUnavailableError(TextCFError):
    """A model the caller needs was never loaded."""


class CapabilityError(TextCFError):
    """The backend cannot provide what was asked, e.g. gradients from a black-box model."""


class MethodInapplicableError(TextCFError):
    """A counterfactual method cannot run against the configured models."""


class ConfigurationError(TextCFError):
    pass


class UpstreamUnavailableError(TextCFError):
    """The chat endpoint kept failing after all retries."""


class MalformedOutputError(TextCFError):
    pass


class IngestionError(TextCFError):
    pass
