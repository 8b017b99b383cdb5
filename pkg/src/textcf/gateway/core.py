from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from textcf.errors import CapabilityError, GatewayUnavailableError, InvalidInputError

logger = logging.getLogger(__name__)

BATCH_SIZE = 64


@dataclass(frozen=True)
class TokenSequence:
    """Classifier tokens of one input, without the model's [CLS]/[SEP] wrapper."""

    token_ids: tuple[int, ...]
    surface_tokens: tuple[str, ...]
    char_offsets: tuple[tuple[int, int], ...]
    text: str
    truncated: bool = False

    def __post_init__(self):
        n = len(self.token_ids)
        if n < 1:
            raise InvalidInputError("token sequence is empty")
        if len(self.surface_tokens) != n or len(self.char_offsets) != n:
            raise InvalidInputError("token_ids, surface_tokens and char_offsets differ in length")
        prev_end = 0
        for start, end in self.char_offsets:
            if start < prev_end or end < start:
                raise InvalidInputError(f"offsets not monotone at ({start}, {end})")
            prev_end = end

    def __len__(self) -> int:
        return len(self.token_ids)

    def substituted_ids(self, edits: Iterable[tuple[int, int]]) -> tuple[int, ...]:
        ids = list(self.token_ids)
        for pos, tok in edits:
            ids[pos] = tok
        return tuple(ids)


@dataclass(frozen=True)
class ClassifierOutput:
    label: int
    probabilities: tuple[float, float]
    logits: tuple[float, float]

    @classmethod
    def from_logits(cls, logits: Sequence[float]) -> "ClassifierOutput":
        z = np.asarray(logits, dtype=np.float64)
        p = np.exp(z - z.max())
        p /= p.sum()
        return cls(label=int(np.argmax(z)), probabilities=(float(p[0]), float(p[1])),
                   logits=(float(z[0]), float(z[1])))

    def margin(self, target: int) -> float:
        """Logit of ``target`` minus the logit of the other class; positive iff label == target."""
        return self.logits[target] - self.logits[1 - target]


@dataclass
class GradientMatrix:
    values: np.ndarray
    target_label: int

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"gradient matrix must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("gradient matrix has non-finite entries")


class TorchClassifier:
    """Binary classifier whose forward pass can start from input embeddings.

    Subclasses supply tokenization, the embedding table and the embeddings-to-logits
    forward; prediction, batching and gradients are shared.
    """

    model_id: str = "unknown"
    max_length: int = 512
    supports_gradients: bool = True

    # subclass hooks -------------------------------------------------------
    def _encode(self, text: str) -> tuple[list[int], list[str], list[tuple[int, int]]]:
        raise NotImplementedError

    def _logits_from_embeds(self, embeds: torch.Tensor, token_ids: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def embedding_matrix(self) -> torch.Tensor:
        raise NotImplementedError

    @property
    def special_ids(self) -> frozenset[int]:
        raise NotImplementedError

    def replacement_surface(self, token_id: int) -> str:
        """Text spliced into the source string when a token is replaced by ``token_id``."""
        raise NotImplementedError

    def substitution_mask(self, tokens: TokenSequence, position: int) -> np.ndarray:
        """Boolean mask over the vocabulary of tokens allowed at ``position``."""
        mask = np.ones(self.embedding_matrix().shape[0], dtype=bool)
        mask[list(self.special_ids)] = False
        return mask

    # shared ---------------------------------------------------------------
    @property
    def vocab_size(self) -> int:
        return int(self.embedding_matrix().shape[0])

    def tokenize(self, text: str) -> TokenSequence:
        if not text or not text.strip():
            raise InvalidInputError("cannot tokenize empty text")
        ids, toks, offs = self._encode(text)
        truncated = False
        if len(ids) > self.max_length:
            logger.warning("input of %d tokens truncated to %d", len(ids), self.max_length)
            ids, toks, offs = ids[: self.max_length], toks[: self.max_length], offs[: self.max_length]
            truncated = True
        if not ids:
            raise InvalidInputError(f"text {text!r} produced no tokens")
        return TokenSequence(tuple(ids), tuple(toks), tuple(tuple(o) for o in offs), text, truncated)

    def eligible_positions(self, tokens: TokenSequence) -> list[int]:
        special = self.special_ids
        return [i for i, t in enumerate(tokens.token_ids) if t not in special]

    def splice(self, tokens: TokenSequence, edits: Iterable[tuple[int, int]]) -> str:
        text = tokens.text[: tokens.char_offsets[-1][1]] if tokens.truncated else tokens.text
        for pos, tok in sorted(edits, reverse=True):
            start, end = tokens.char_offsets[pos]
            text = text[:start] + self.replacement_surface(tok) + text[end:]
        return text

    @torch.no_grad()
    def logits_batch(self, sequences: Sequence[Sequence[int]]) -> np.ndarray:
        out = np.zeros((len(sequences), 2), dtype=np.float64)
        by_len: dict[int, list[int]] = {}
        for i, seq in enumerate(sequences):
            by_len.setdefault(len(seq), []).append(i)
        emb = self.embedding_matrix()
        for idx in by_len.values():
            for s in range(0, len(idx), BATCH_SIZE):
                chunk = idx[s: s + BATCH_SIZE]
                ids = torch.tensor([list(sequences[i]) for i in chunk], dtype=torch.long)
                logits = self._logits_from_embeds(emb[ids], ids)
                out[chunk] = logits.detach().double().cpu().numpy()
        return out

    def input_gradients(self, tokens: TokenSequence, weights: dict[int, float]) -> np.ndarray:
        """Gradient of sum_c weights[c] * logit_c with respect to each input embedding."""
        if not self.supports_gradients:
            raise CapabilityError(f"{self.model_id} does not expose gradients")
        ids = torch.tensor([list(tokens.token_ids)], dtype=torch.long)
        embeds = self.embedding_matrix()[ids].detach().clone().requires_grad_(True)
        with torch.enable_grad():
            logits = self._logits_from_embeds(embeds, ids)[0]
            objective = sum(w * logits[c] for c, w in weights.items())
            if not objective.requires_grad:  # output independent of the input
                return np.zeros(tuple(embeds.shape[1:]), dtype=np.float64)
            (grad,) = torch.autograd.grad(objective, embeds, allow_unused=True)
        if grad is None:
            return np.zeros(tuple(embeds.shape[1:]), dtype=np.float64)
        return grad[0].detach().double().cpu().numpy()


class MaskedLM:
    model_id: str = "unknown"

    def topk(self, tokens: TokenSequence, position: int, k: int) -> list[tuple[int, float]]:
        """(token id, probability) pairs for ``position`` with that token masked."""
        raise NotImplementedError


class PerplexityScorer:
    model_id: str = "unknown"

    def perplexity(self, text: str) -> float:
        raise NotImplementedError


@dataclass
class ModelGateway:
    """Single entry point to the classifier, masked LM, perplexity scorer and chat client."""

    classifier: TorchClassifier | None = None
    mlm: MaskedLM | None = None
    scorer: PerplexityScorer | None = None
    chat: object | None = None
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False)
    _emb_cache: tuple | None = field(default=None, repr=False)

    def _need(self, name: str):
        part = getattr(self, name)
        if part is None:
            raise GatewayUnavailableError(f"{name} is not loaded")
        return part

    # classifier -----------------------------------------------------------
    def tokenize(self, text: str) -> TokenSequence:
        return self._need("classifier").tokenize(text)

    def classify(self, text: str) -> ClassifierOutput:
        if not text or not text.strip():
            raise InvalidInputError("cannot classify empty text")
        clf = self._need("classifier")
        with self._lock:
            tokens = clf.tokenize(text)
            return ClassifierOutput.from_logits(clf.logits_batch([tokens.token_ids])[0])

    def classify_ids(self, token_ids: Sequence[int]) -> ClassifierOutput:
        return self.classify_batch([token_ids])[0]

    def classify_batch(self, sequences: Sequence[Sequence[int]]) -> list[ClassifierOutput]:
        clf = self._need("classifier")
        if not sequences:
            return []
        with self._lock:
            logits = clf.logits_batch(sequences)
        return [ClassifierOutput.from_logits(z) for z in logits]

    def embedding_gradients(self, tokens: TokenSequence, target_label: int) -> GradientMatrix:
        clf = self._need("classifier")
        with self._lock:
            values = clf.input_gradients(tokens, {target_label: 1.0})
        return GradientMatrix(values, target_label)

    def margin_gradients(self, tokens: TokenSequence, target_label: int) -> GradientMatrix:
        """Gradient of logit[target] - logit[other]: the direction that moves toward ``target``."""
        clf = self._need("classifier")
        with self._lock:
            values = clf.input_gradients(tokens, {target_label: 1.0, 1 - target_label: -1.0})
        return GradientMatrix(values, target_label)

    def embedding_matrix(self) -> np.ndarray:
        clf = self._need("classifier")
        cached = self._emb_cache
        if cached is None or cached[0] is not clf:
            cached = (clf, clf.embedding_matrix().detach().double().cpu().numpy())
            self._emb_cache = cached
        return cached[1]

    # masked LM --------------------------------------------------------------
    def mlm_topk(self, tokens: TokenSequence, position: int, k: int) -> list[tuple[int, float]]:
        if not 0 <= position < len(tokens):
            raise InvalidInputError(f"position {position} out of range for {len(tokens)} tokens")
        if k < 1:
            raise InvalidInputError("k must be positive")
        mlm = self._need("mlm")
        with self._lock:
            cands = mlm.topk(tokens, position, k)
        return sorted(cands, key=lambda c: (-c[1], c[0]))[:k]

    # perplexity -------------------------------------------------------------
    def sequence_perplexity(self, text: str) -> float:
        if not text or not text.strip():
            raise InvalidInputError("cannot score empty text")
        scorer = self._need("scorer")
        with self._lock:
            return float(scorer.perplexity(text))

    @property
    def scorer_model_id(self) -> str | None:
        return self.scorer.model_id if self.scorer is not None else None

    # chat -------------------------------------------------------------------
    def chat_complete(self, system_prompt: str, user_prompt: str, **decoding) -> str:
        return self._need("chat").complete(system_prompt, user_prompt, **decoding)
