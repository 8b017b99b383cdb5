"""Gradient-guided substitution beam search and the token-level HotFlip method built on it."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from textcf.data import ExampleRecord
from textcf.errors import CapabilityError, InvalidInputError, MethodInapplicableError
from textcf.gateway.core import ClassifierOutput, GradientMatrix, ModelGateway, TokenSequence

Edits = tuple[tuple[int, int], ...]
# position -> [(token id, value)], best first
Candidates = dict[int, list[tuple[int, float]]]

RESULT_SCHEMA = 1


@dataclass(frozen=True)
class SearchConfig:
    w: int = 5
    b: int = 15
    k: int = 30
    t: float = 0.3
    substitutions_after_loc: float = 0.3
    seed: int = 0
    # restrict Shapley refinement to this many best gradient-scored candidates (None: all)
    shapley_top: int | None = None

    def __post_init__(self):
        for name in ("w", "b", "k"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be a positive integer")
        for name in ("t", "substitutions_after_loc"):
            if not 0 < getattr(self, name) <= 1:
                raise InvalidInputError(f"{name} must lie in (0, 1]")


def max_edits(n_tokens: int, fraction: float) -> int:
    """floor(fraction * L), but at least one edit is always allowed."""
    return max(1, math.floor(fraction * n_tokens))


@dataclass(frozen=True)
class SubstitutionState:
    base: TokenSequence
    edits: Edits
    output: ClassifierOutput
    score: float

    def __post_init__(self):
        positions = [p for p, _ in self.edits]
        if len(set(positions)) != len(positions):
            raise ValueError("at most one edit per position")
        if any(not 0 <= p < len(self.base) for p in positions):
            raise ValueError("edit position out of range")

    @property
    def token_ids(self) -> tuple[int, ...]:
        return self.base.substituted_ids(self.edits)

    @property
    def edited_positions(self) -> set[int]:
        return {p for p, _ in self.edits}

    def sequence(self) -> TokenSequence:
        return replace(self.base, token_ids=self.token_ids)


@dataclass
class CounterfactualResult:
    example_id: str
    method: str
    original_text: str
    original_label: int
    counterfactual_text: str | None = None
    counterfactual_label: int | None = None
    flipped: bool = False
    edits_made: int | None = None
    wall_time: float = 0.0
    failure_reason: str | None = None
    perplexity: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        expect_flip = self.counterfactual_text is not None and self.counterfactual_label is not None \
            and self.counterfactual_label != self.original_label
        if self.flipped != expect_flip:
            raise ValueError(f"flipped={self.flipped} inconsistent with labels/text")
        needs_reason = self.counterfactual_text is None or not self.flipped
        if needs_reason != (self.failure_reason is not None):
            raise ValueError("failure_reason must be set exactly when there is no valid counterfactual")

    @classmethod
    def from_classification(cls, example_id, method, original_text, original_label, counterfactual_text,
                            counterfactual_label, failure_if_same="no_flip", **kw) -> "CounterfactualResult":
        flipped = counterfactual_label != original_label
        return cls(example_id, method, original_text, original_label, counterfactual_text,
                   counterfactual_label, flipped, failure_reason=None if flipped else failure_if_same, **kw)

    @classmethod
    def failure(cls, example_id, method, original_text, original_label, reason, **kw) -> "CounterfactualResult":
        return cls(example_id, method, original_text, original_label, failure_reason=reason, **kw)

    def to_json(self) -> dict:
        return {
            "schema": RESULT_SCHEMA,
            "example_id": self.example_id,
            "method": self.method,
            "original_text": self.original_text,
            "original_label": self.original_label,
            "counterfactual_text": self.counterfactual_text,
            "counterfactual_label": self.counterfactual_label,
            "flipped": self.flipped,
            "edits_made": self.edits_made,
            "wall_time": self.wall_time,
            "failure_reason": self.failure_reason,
            "perplexity": self.perplexity,
            "metadata": self.metadata,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CounterfactualResult":
        d = {k: v for k, v in d.items() if k not in ("schema", "config_fingerprint", "dataset")}
        return cls(**d)


# --- candidate scoring -------------------------------------------------------------

def first_order_values(embeddings: np.ndarray, gradients: GradientMatrix, token_ids) -> np.ndarray:
    """(L, V) matrix of <e(v) - e(x_p), g_p>: estimated change of the objective per substitution."""
    g = gradients.values
    by_token = g @ embeddings.T
    current = np.einsum("ld,ld->l", embeddings[list(token_ids)], g)
    return by_token - current[:, None]


def _top(values: np.ndarray, allowed: np.ndarray, k: int) -> list[tuple[int, float]]:
    idx = np.flatnonzero(allowed)
    if idx.size == 0:
        return []
    vals = values[idx]
    if idx.size > k:
        keep = np.argpartition(-vals, k - 1)[:k]
        # widen to include anything tied with the k-th value so tie-breaking stays by token id
        kth = np.min(vals[keep])
        keep = np.flatnonzero(vals >= kth)
        idx, vals = idx[keep], vals[keep]
    order = np.lexsort((idx, -vals))[:k]
    return [(int(idx[i]), float(vals[i])) for i in order]


def score_candidates(state: SubstitutionState, gradients: GradientMatrix, k: int,
                     gateway: ModelGateway) -> Candidates:
    clf = gateway.classifier
    emb = gateway.embedding_matrix()
    ids = state.token_ids
    values = first_order_values(emb, gradients, ids)
    out: Candidates = {}
    for p in clf.eligible_positions(state.base):
        if p in state.edited_positions:
            continue
        allowed = clf.substitution_mask(state.base, p).copy()
        allowed[ids[p]] = False
        out[p] = _top(values[p], allowed, k)
    return out


# --- beam search -------------------------------------------------------------------

def beam_step(beams: list[SubstitutionState], candidates: list[Candidates], b: int,
              gateway: ModelGateway, target: int, budget: int | None = None) -> list[SubstitutionState]:
    """Extend every beam by one edit, keep the ``b`` best children and score them exactly.

    ``candidates[i]`` holds the candidate values for ``beams[i]``; a child's ranking value is
    its parent's exact score plus the candidate value. Ties go to the lexicographically
    smaller edit set.
    """
    if not beams:
        raise InvalidInputError("beam_step needs at least one beam")
    children: dict[Edits, float] = {}
    for beam, cands in zip(beams, candidates):
        if budget is not None and len(beam.edits) >= budget:
            continue
        used = beam.edited_positions
        for p, options in cands.items():
            if p in used:
                continue
            for tok, value in options:
                edits = tuple(sorted(beam.edits + ((p, tok),)))
                est = beam.score + value
                if est > children.get(edits, -math.inf):
                    children[edits] = est
    ranked = sorted(children.items(), key=lambda kv: (-kv[1], kv[0]))[:b]
    if not ranked:
        return []
    base = beams[0].base
    outputs = gateway.classify_batch([base.substituted_ids(e) for e, _ in ranked])
    return [SubstitutionState(base, e, o, o.margin(target)) for (e, _), o in zip(ranked, outputs)]


@dataclass
class SearchOutcome:
    state: SubstitutionState | None
    text: str | None
    output: ClassifierOutput | None
    depth: int
    evaluations: int


def beam_search(gateway: ModelGateway, tokens: TokenSequence, original: ClassifierOutput,
                propose: Callable[[SubstitutionState], Candidates], b: int, budget: int) -> SearchOutcome:
    """Search depth by depth; return the first depth's best verified flip.

    A state counts as a flip only after its spliced text is re-classified from scratch.
    Among flips at the same depth the highest flip-class probability wins.
    """
    target = 1 - original.label
    beams = [SubstitutionState(tokens, (), original, original.margin(target))]
    evaluations = 0
    depth = 0
    for depth in range(1, budget + 1):
        beams = beam_step(beams, [propose(s) for s in beams], b, gateway, target, budget)
        evaluations += len(beams)
        if not beams:
            depth -= 1
            break
        flips = sorted((s for s in beams if s.output.label == target),
                       key=lambda s: (-s.output.probabilities[target], s.edits))
        for s in flips:
            text = gateway.classifier.splice(tokens, s.edits)
            out = gateway.classify(text)
            evaluations += 1
            if out.label == target:
                return SearchOutcome(s, text, out, depth, evaluations)
    return SearchOutcome(None, None, None, depth, evaluations)


def search_result(example: ExampleRecord, method: str, gateway: ModelGateway, tokens: TokenSequence,
                  original: ClassifierOutput, outcome: SearchOutcome, budget: int, started: float,
                  extra: dict | None = None) -> CounterfactualResult:
    meta = {"n_tokens": len(tokens), "max_edits": budget, "depth": outcome.depth,
            "evaluations": outcome.evaluations, "truncated": tokens.truncated, **(extra or {})}
    text = example.classifier_input
    if outcome.state is None:
        return CounterfactualResult.failure(example.id, method, text, original.label, "budget_exhausted",
                                            wall_time=time.perf_counter() - started, metadata=meta)
    clf = gateway.classifier
    meta["edits"] = [[p, tokens.surface_tokens[p], clf.replacement_surface(t)] for p, t in outcome.state.edits]
    return CounterfactualResult.from_classification(
        example.id, method, text, original.label, outcome.text, outcome.output.label,
        edits_made=len(outcome.state.edits), wall_time=time.perf_counter() - started, metadata=meta)


def hotflip_generate(example: ExampleRecord, config: SearchConfig, gateway: ModelGateway) -> CounterfactualResult:
    """Token-level HotFlip: first-order scores over the whole vocabulary, re-derived at every beam state."""
    started = time.perf_counter()
    tokens = gateway.tokenize(example.classifier_input)
    original = gateway.classify_ids(tokens.token_ids)
    target = 1 - original.label
    budget = max_edits(len(tokens), config.t)

    def propose(state: SubstitutionState) -> Candidates:
        try:
            grads = gateway.margin_gradients(state.sequence(), target)
        except CapabilityError as exc:
            raise MethodInapplicableError(f"hotflip needs gradients: {exc}") from exc
        return score_candidates(state, grads, config.k, gateway)

    outcome = beam_search(gateway, tokens, original, propose, config.b, budget)
    return search_result(example, "hotflip", gateway, tokens, original, outcome, budget, started)
