"""Small, fully local stand-ins for the real models.

Used by the test-suite and by ``--backend toy`` runs: a whitespace-tokenized word
classifier (linear or MLP over embeddings), a lexicon-driven masked LM, a bigram
perplexity scorer and a rule-based negation generator.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from typing import Sequence

import numpy as np
import torch

from textcf.gateway.core import MaskedLM, ModelGateway, PerplexityScorer, TorchClassifier

SPECIALS = ("[UNK]", "[SEP]")
_WORD = re.compile(r"\S+")


class WordClassifier(TorchClassifier):
    """Whitespace tokens over a fixed vocabulary; ``head`` maps (B, L, d) embeddings to (B, 2) logits."""

    def __init__(self, vocab: Sequence[str], embeddings: np.ndarray, head: torch.nn.Module,
                 model_id: str = "toy-classifier", max_length: int = 512):
        self.vocab = list(vocab)
        missing = [s for s in SPECIALS if s not in self.vocab]
        if missing:
            raise ValueError(f"vocabulary lacks special tokens {missing}")
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self._emb = torch.as_tensor(np.asarray(embeddings), dtype=torch.float64)
        self.head = head.double()
        self.model_id = model_id
        self.max_length = max_length

    def embedding_matrix(self):
        return self._emb

    @property
    def special_ids(self):
        return frozenset(self.index[s] for s in SPECIALS)

    def _encode(self, text):
        ids, toks, offs = [], [], []
        unk = self.index["[UNK]"]
        for m in _WORD.finditer(text):
            w = m.group()
            ids.append(self.index.get(w, unk))
            toks.append(w)
            offs.append((m.start(), m.end()))
        return ids, toks, offs

    def replacement_surface(self, token_id):
        return self.vocab[token_id]

    def _logits_from_embeds(self, embeds, token_ids):
        return self.head(embeds)


class LinearBagHead(torch.nn.Module):
    """logits = sum over positions of e_p @ W + b; exactly linear in every input embedding."""

    def __init__(self, weight: np.ndarray, bias: Sequence[float] = (0.0, 0.0)):
        super().__init__()
        self.weight = torch.nn.Parameter(torch.as_tensor(weight, dtype=torch.float64))
        self.bias = torch.nn.Parameter(torch.as_tensor(bias, dtype=torch.float64))

    def forward(self, embeds):
        return embeds.sum(dim=1) @ self.weight + self.bias


class MLPHead(torch.nn.Module):
    def __init__(self, d: int, hidden: int = 16, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.w1 = torch.nn.Parameter(torch.randn(d, hidden, generator=g, dtype=torch.float64))
        self.b1 = torch.nn.Parameter(torch.randn(hidden, generator=g, dtype=torch.float64) * 0.1)
        self.w2 = torch.nn.Parameter(torch.randn(hidden, 2, generator=g, dtype=torch.float64) / math.sqrt(hidden))

    def forward(self, embeds):
        return torch.tanh(embeds.mean(dim=1) @ self.w1 + self.b1) @ self.w2


class ConstantHead(torch.nn.Module):
    def __init__(self, logits=(0.3, -0.3)):
        super().__init__()
        self.register_buffer("logits", torch.tensor(logits, dtype=torch.float64))

    def forward(self, embeds):
        return self.logits.expand(embeds.shape[0], 2)


def random_linear_classifier(rng: np.random.Generator, vocab_size: int, d: int = 4) -> WordClassifier:
    words = [f"w{i}" for i in range(vocab_size - len(SPECIALS))]
    emb = rng.normal(size=(vocab_size, d))
    head = LinearBagHead(rng.normal(size=(d, 2)), rng.normal(size=2) * 0.5)
    return WordClassifier([*SPECIALS, *words], emb, head, model_id="toy-linear-random")


# --- sentiment toy world ---------------------------------------------------------

LEXICON: dict[str, tuple[str, float]] = {
    "loved": ("verb", 3.0), "liked": ("verb", 2.0), "enjoyed": ("verb", 2.0), "adored": ("verb", 3.0),
    "hated": ("verb", -3.0), "disliked": ("verb", -2.0), "watched": ("verb", 0.0), "saw": ("verb", 0.0),
    "great": ("adj", 2.5), "good": ("adj", 1.5), "wonderful": ("adj", 3.0), "fun": ("adj", 1.5),
    "bad": ("adj", -1.5), "awful": ("adj", -3.0), "boring": ("adj", -2.0), "dull": ("adj", -2.0),
    "long": ("adj", -0.3), "new": ("adj", 0.2),
    "movie": ("noun", 0.0), "film": ("noun", 0.0), "plot": ("noun", 0.0), "acting": ("noun", 0.0),
    "story": ("noun", 0.0), "cast": ("noun", 0.0), "ending": ("noun", 0.0), "mess": ("noun", -1.5),
    "gem": ("noun", 1.5),
    "i": ("func", 0.0), "the": ("func", 0.0), "a": ("func", 0.0), "was": ("func", 0.0),
    "is": ("func", 0.0), "and": ("func", 0.0), "very": ("func", 0.0), "it": ("func", 0.0),
    "not": ("func", -1.0), "this": ("func", 0.0), "what": ("func", 0.0), "?": ("func", 0.0),
    "who": ("func", 0.0), ".": ("func", 0.0),
}
ANTONYMS = {
    "loved": "hated", "liked": "disliked", "enjoyed": "disliked", "adored": "hated",
    "great": "awful", "good": "bad", "wonderful": "awful", "fun": "boring", "gem": "mess",
}
ANTONYMS.update({v: k for k, v in list(ANTONYMS.items())})
SENTIMENT_BIAS = 0.2

_TEMPLATES = (
    "i {verb} the {noun}",
    "the {noun} was {adj}",
    "this {noun} is {adj} and {adj}",
    "a {adj} {noun}",
    "i {verb} it and the {noun} was {adj}",
    "the {noun} is very {adj}",
    "what a {adj} {noun}",
)


def sentiment_vocab() -> list[str]:
    return [*SPECIALS, *LEXICON]


def sentiment_classifier(d: int = 8, seed: int = 0) -> WordClassifier:
    """Linear classifier whose logit margin is the lexicon polarity sum (plus a small bias)."""
    vocab = sentiment_vocab()
    rng = np.random.default_rng(seed)
    emb = rng.normal(scale=0.3, size=(len(vocab), d))
    emb[:, 0] = [LEXICON.get(w, ("", 0.0))[1] for w in vocab]
    weight = np.zeros((d, 2))
    weight[0] = (-0.5, 0.5)
    return WordClassifier(vocab, emb, LinearBagHead(weight, (-SENTIMENT_BIAS / 2, SENTIMENT_BIAS / 2)),
                          model_id="toy-sentiment-linear")


class LexiconMaskedLM(MaskedLM):
    """Prefers words of the masked slot's lexical class, softly ranked by their embedding proximity.

    A stub: unlike a real MLM it peeks at the masked word's class.
    """

    model_id = "toy-lexicon-mlm"

    def __init__(self, classifier: WordClassifier, temperature: float = 1.0):
        self.clf = classifier
        self.temperature = temperature

    def topk(self, tokens, position, k):
        vocab = self.clf.vocab
        emb = self.clf.embedding_matrix().numpy()
        current = tokens.surface_tokens[position]
        cls = LEXICON.get(current, ("func", 0.0))[0]
        ctx_ids = [t for i, t in enumerate(tokens.token_ids) if i != position]
        ctx = emb[ctx_ids].mean(axis=0) if ctx_ids else np.zeros(emb.shape[1])
        scores = emb[:, 1:] @ ctx[1:] / self.temperature
        scores += np.array([3.0 if LEXICON.get(w, ("", 0))[0] == cls else -3.0 for w in vocab])
        scores[[self.clf.index[s] for s in SPECIALS]] = -np.inf
        p = np.exp(scores - scores.max())
        p /= p.sum()
        order = np.lexsort((np.arange(len(p)), -p))[:k]
        return [(int(i), float(p[i])) for i in order]


class TableMaskedLM(MaskedLM):
    """Returns fixed candidate lists per position: ``table[position] = [(token_id, prob), ...]``."""

    model_id = "toy-table-mlm"

    def __init__(self, table: dict[int, list[tuple[int, float]]]):
        self.table = table

    def topk(self, tokens, position, k):
        return list(self.table.get(position, []))[:k]


class UniformPerplexity(PerplexityScorer):
    """Every word has probability 1/V, so perplexity is V for any text."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size
        self.model_id = f"toy-uniform-{vocab_size}"

    def perplexity(self, text):
        words = text.split()
        nll = -sum(math.log(1.0 / self.vocab_size) for _ in words) / len(words)
        return math.exp(nll)


class BigramPerplexity(PerplexityScorer):
    """Add-one smoothed word bigram model with a sentence-start symbol."""

    model_id = "toy-bigram"

    def __init__(self, corpus: Sequence[str]):
        self.unigrams: Counter = Counter()
        self.bigrams: Counter = Counter()
        vocab = {"<s>"}
        for line in corpus:
            words = ["<s>", *line.split()]
            vocab.update(words)
            self.unigrams.update(words[:-1])
            self.bigrams.update(zip(words[:-1], words[1:]))
        self.vocab_size = len(vocab) + 1  # unseen-word bucket

    def perplexity(self, text):
        words = ["<s>", *text.split()]
        nll = 0.0
        for prev, cur in zip(words[:-1], words[1:]):
            p = (self.bigrams[(prev, cur)] + 1) / (self.unigrams[prev] + self.vocab_size)
            nll -= math.log(p)
        return math.exp(nll / (len(words) - 1))


class NegationGenerator:
    """Polyjuice stand-in: swaps the first polar word for its antonym, else inserts "not"."""

    model_id = "toy-negation"

    def generate(self, text: str, control_code: str | None = None) -> list[str]:
        words = text.split()
        for i, w in enumerate(words):
            if w in ANTONYMS:
                words[i] = ANTONYMS[w]
                return [" ".join(words)]
        for i, w in enumerate(words):
            if w in ("was", "is"):
                return [" ".join(words[: i + 1] + ["not"] + words[i + 1:])]
        return [text]


class EchoGenerator:
    model_id = "toy-echo"

    def generate(self, text: str, control_code: str | None = None) -> list[str]:
        return [text]


def toy_corpus(name: str, size: int, seed: int = 1234) -> list[dict]:
    """Deterministic synthetic rows in the ingest schema (before preprocessing)."""
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[str]] = {}
    for w, (c, _) in LEXICON.items():
        by_class.setdefault(c, []).append(w)
    clf_bias = SENTIMENT_BIAS

    def fill(template):
        out = template
        while "{" in out:
            start = out.index("{")
            end = out.index("}", start)
            slot = out[start + 1: end]
            out = out[:start] + str(rng.choice(by_class[slot])) + out[end + 1:]
        return out

    rows = []
    for i in range(size):
        if name == "sst2":
            text = fill(_TEMPLATES[int(rng.integers(len(_TEMPLATES)))])
            score = sum(LEXICON.get(w, ("", 0.0))[1] for w in text.split()) + clf_bias
            rows.append({"row": i, "text": text.capitalize(), "label": int(score > 0)})
        elif name == "qnli":
            noun = str(rng.choice(by_class["noun"]))
            question = f"what is the {noun} ?"
            sentence = fill(str(rng.choice(_TEMPLATES[1:3])))
            score = sum(LEXICON.get(w, ("", 0.0))[1] for w in f"{question} {sentence}".split()) + clf_bias
            rows.append({"row": i, "question": question, "sentence": sentence,
                         "label": "entailment" if score > 0 else "not_entailment"})
        else:
            raise ValueError(f"unknown toy dataset {name!r}")
    return rows


def toy_gateway(chat=None, seed: int = 0) -> ModelGateway:
    clf = sentiment_classifier(seed=seed)
    corpus = [r["text"].lower() for r in toy_corpus("sst2", 300, seed=99)]
    return ModelGateway(classifier=clf, mlm=LexiconMaskedLM(clf), scorer=BigramPerplexity(corpus), chat=chat)

