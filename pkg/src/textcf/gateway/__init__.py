from textcf.gateway.chat import ChatClient, ChatExchange, ResponseCache, cache_key
from textcf.gateway.core import (
    ClassifierOutput,
    GradientMatrix,
    MaskedLM,
    ModelGateway,
    PerplexityScorer,
    TokenSequence,
    TorchClassifier,
)

__all__ = [
    "ChatClient", "ChatExchange", "ClassifierOutput", "GradientMatrix", "MaskedLM",
    "ModelGateway", "PerplexityScorer", "ResponseCache", "TokenSequence", "TorchClassifier",
    "cache_key",
]
