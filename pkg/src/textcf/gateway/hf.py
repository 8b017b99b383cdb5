"""Hugging Face backends: fine-tuned BERT classifier, BERT masked LM, GPT-2 perplexity."""
from __future__ import annotations

import logging
import math

import numpy as np
import torch

from textcf.errors import GatewayUnavailableError
from textcf.gateway.core import MaskedLM, PerplexityScorer, TokenSequence, TorchClassifier

logger = logging.getLogger(__name__)

SEP = "[SEP]"


def _load(loader, model_id: str, **kwargs):
    try:
        return loader.from_pretrained(model_id, **kwargs)
    except Exception as exc:  # network, missing files, bad id
        raise GatewayUnavailableError(f"could not load {model_id!r}: {exc}") from exc


class HFClassifier(TorchClassifier):
    """WordPiece sequence classifier, e.g. ``textattack/bert-base-uncased-SST-2``.

    Text containing a literal ``[SEP]`` is fed as a sentence pair: token type 1 after the
    first separator.
    """

    def __init__(self, model_id: str, device: str = "cpu"):
        from transformers import AutoModelForSequenceClassification, AutoTokenizer

        self.model_id = model_id
        self.tokenizer = _load(AutoTokenizer, model_id, use_fast=True)
        self.model = _load(AutoModelForSequenceClassification, model_id).to(device).eval()
        if self.model.config.num_labels != 2:
            raise GatewayUnavailableError(f"{model_id} has {self.model.config.num_labels} labels, need 2")
        self.device = device
        self.max_length = self.tokenizer.model_max_length - 2 if self.tokenizer.model_max_length < 10**6 else 510
        self._emb = self.model.get_input_embeddings().weight
        self._special = frozenset(self.tokenizer.all_special_ids)
        vocab = self.tokenizer.convert_ids_to_tokens(list(range(len(self.tokenizer))))
        self._continuation = np.array([t.startswith("##") for t in vocab])
        self._unusable = np.array([t.startswith("[unused") or t in self.tokenizer.all_special_tokens for t in vocab])

    def embedding_matrix(self) -> torch.Tensor:
        return self._emb

    @property
    def special_ids(self) -> frozenset[int]:
        return self._special

    def _encode(self, text):
        enc = self.tokenizer(text, add_special_tokens=False, return_offsets_mapping=True)
        ids = enc["input_ids"]
        return ids, self.tokenizer.convert_ids_to_tokens(ids), [tuple(o) for o in enc["offset_mapping"]]

    def replacement_surface(self, token_id: int) -> str:
        tok = self.tokenizer.convert_ids_to_tokens(token_id)
        return tok[2:] if tok.startswith("##") else tok

    def substitution_mask(self, tokens: TokenSequence, position: int) -> np.ndarray:
        # keep word-initial vs continuation pieces apart so the edited text re-tokenizes the same way
        is_cont = tokens.surface_tokens[position].startswith("##")
        return (self._continuation == is_cont) & ~self._unusable

    def _logits_from_embeds(self, embeds, token_ids):
        n = embeds.shape[0]
        cls_id, sep_id = self.tokenizer.cls_token_id, self.tokenizer.sep_token_id
        cls = self._emb[torch.full((n, 1), cls_id)]
        sep = self._emb[torch.full((n, 1), sep_id)]
        full = torch.cat([cls, embeds, sep], dim=1).to(self.device)
        seps = (token_ids == sep_id).long()
        after_first = (seps.cumsum(dim=1) - seps).clamp(max=1)
        token_type = torch.cat([torch.zeros(n, 1, dtype=torch.long), after_first,
                                after_first[:, -1:]], dim=1).to(self.device)
        if not self.model.config.type_vocab_size or self.model.config.type_vocab_size < 2:
            token_type = torch.zeros_like(token_type)
        attention = torch.ones(full.shape[:2], dtype=torch.long, device=self.device)
        return self.model(inputs_embeds=full, attention_mask=attention, token_type_ids=token_type).logits


class HFMaskedLM(MaskedLM):
    """Masked LM sharing the classifier's vocabulary (``bert-base-uncased`` for the TextAttack models)."""

    def __init__(self, model_id: str = "bert-base-uncased", device: str = "cpu", classifier: HFClassifier | None = None):
        from transformers import AutoModelForMaskedLM, AutoTokenizer

        self.model_id = model_id
        self.tokenizer = _load(AutoTokenizer, model_id, use_fast=True)
        self.model = _load(AutoModelForMaskedLM, model_id).to(device).eval()
        self.device = device
        if classifier is not None and len(classifier.tokenizer) != len(self.tokenizer):
            raise GatewayUnavailableError(
                f"masked LM {model_id} vocabulary ({len(self.tokenizer)}) differs from classifier's "
                f"({len(classifier.tokenizer)})")

    @torch.no_grad()
    def topk(self, tokens: TokenSequence, position: int, k: int):
        ids = [self.tokenizer.cls_token_id, *tokens.token_ids, self.tokenizer.sep_token_id]
        ids[position + 1] = self.tokenizer.mask_token_id
        logits = self.model(input_ids=torch.tensor([ids], device=self.device)).logits[0, position + 1]
        probs = torch.softmax(logits.double(), dim=-1)
        top = torch.topk(probs, min(k, probs.shape[0]))
        return [(int(i), float(p)) for p, i in zip(top.values, top.indices)]


class GPT2Perplexity(PerplexityScorer):
    """exp(mean NLL) under a causal LM.

    The end-of-text token is prepended so every real token, including the first, is
    predicted from some context; a one-token text is therefore scored by the
    first-token distribution.
    """

    def __init__(self, model_id: str = "gpt2", device: str = "cpu"):
        from transformers import AutoModelForCausalLM, AutoTokenizer

        self.model_id = model_id
        self.tokenizer = _load(AutoTokenizer, model_id)
        self.model = _load(AutoModelForCausalLM, model_id).to(device).eval()
        self.device = device
        self.window = getattr(self.model.config, "n_positions", 1024)

    @torch.no_grad()
    def perplexity(self, text: str) -> float:
        bos = self.tokenizer.bos_token_id
        ids = [bos, *self.tokenizer(text)["input_ids"]][: self.window]
        input_ids = torch.tensor([ids], device=self.device)
        logits = self.model(input_ids=input_ids).logits[0, :-1].double()
        nll = torch.nn.functional.cross_entropy(logits, input_ids[0, 1:])
        return math.exp(float(nll))
