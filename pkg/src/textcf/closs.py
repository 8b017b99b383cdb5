"""CLOSS-EO: masked-LM substitutes, Shapley-refined values, beam search under an edit cap.

No embedding optimisation and no LM-head retraining: candidates come from the masked LM
on the unmodified input.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from textcf.data import ExampleRecord
from textcf.errors import CapabilityError, GatewayUnavailableError, MethodInapplicableError
from textcf.gateway.core import ModelGateway, TokenSequence
from textcf.search import (
    Candidates,
    CounterfactualResult,
    SearchConfig,
    SubstitutionState,
    beam_search,
    first_order_values,
    max_edits,
    search_result,
)


@dataclass
class Candidate:
    token: int
    mlm_probability: float
    gradient_score: float
    shapley_estimate: float | None = None

    @property
    def value(self) -> float:
        return self.gradient_score if self.shapley_estimate is None else self.shapley_estimate


class CandidatePool(dict):
    """position -> list[Candidate]."""

    def promising(self) -> dict[int, Candidate]:
        """Best candidate per position by current value (ties: lower token id)."""
        return {p: min(cs, key=lambda c: (-c.value, c.token)) for p, cs in self.items() if cs}

    def as_candidates(self) -> Candidates:
        return {p: sorted(((c.token, c.value) for c in cs), key=lambda tv: (-tv[1], tv[0]))
                for p, cs in self.items()}


def propose_substitutes(tokens: TokenSequence, config: SearchConfig, gateway: ModelGateway,
                        target: int) -> CandidatePool:
    """Masked-LM top-K per eligible position, minus the current and special tokens, with gradient scores."""
    if gateway.mlm is None:
        raise MethodInapplicableError("closs needs a masked language model")
    clf = gateway.classifier
    try:
        grads = gateway.margin_gradients(tokens, target)
    except CapabilityError as exc:
        raise MethodInapplicableError(f"closs needs gradients: {exc}") from exc
    values = first_order_values(gateway.embedding_matrix(), grads, tokens.token_ids)
    pool = CandidatePool()
    for p in clf.eligible_positions(tokens):
        allowed = clf.substitution_mask(tokens, p)
        current = tokens.token_ids[p]
        pool[p] = [Candidate(tok, prob, float(values[p, tok]))
                   for tok, prob in gateway.mlm_topk(tokens, p, config.k)
                   if tok != current and allowed[tok]]
    return pool


_ENUMERATE_LIMIT = 4096


def _coalitions(n_others: int, w: int, rng: np.random.Generator) -> list[tuple[np.ndarray, float]]:
    """``w`` weighted subsets of ``range(n_others)`` whose weighted marginals estimate a Shapley value.

    Shapley weighting puts equal mass on every coalition size 0..n_others and spreads it
    uniformly over the subsets of that size. With ``w`` at least the number of sizes the
    samples are stratified: each size gets an equal quota (the leftover goes to random
    sizes) and its mean is weighted 1/(n_others+1). Within a size the subsets are taken
    round-robin from a shuffled enumeration when there are few of them, so small games
    are covered almost exactly; otherwise they are drawn at random. Both are unbiased.
    """
    n_sizes = n_others + 1
    if w < n_sizes:
        sizes = rng.integers(0, n_sizes, size=w)
        return [(rng.choice(n_others, size=int(s), replace=False), 1.0 / w) for s in sizes]
    quota = np.full(n_sizes, w // n_sizes)
    quota[rng.choice(n_sizes, size=w % n_sizes, replace=False)] += 1
    out = []
    for size, q in enumerate(quota):
        if math.comb(n_others, size) <= _ENUMERATE_LIMIT:
            subsets = [np.array(c, dtype=int) for c in itertools.combinations(range(n_others), size)]
            order = rng.permutation(len(subsets))
            picks = [subsets[order[j % len(subsets)]] for j in range(q)]
        else:
            picks = [rng.choice(n_others, size=size, replace=False) for _ in range(q)]
        out += [(subset, 1.0 / (n_sizes * q)) for subset in picks]
    return out


def _plans(candidates: list[tuple[int, int]], pool: CandidatePool, state: SubstitutionState,
           w: int, seed: int) -> list[list[tuple[tuple, tuple, float]]]:
    promising = pool.promising()
    blocked = state.edited_positions
    plans = []
    for pos, tok in candidates:
        others = [(q, c.token) for q, c in sorted(promising.items()) if q != pos and q not in blocked]
        rng = np.random.default_rng(seed)
        plan = []
        for subset, weight in _coalitions(len(others), w, rng):
            s_edits = state.edits + tuple(others[i] for i in sorted(subset))
            plan.append((state.base.substituted_ids(s_edits),
                         state.base.substituted_ids(s_edits + ((pos, tok),)), weight))
        plans.append(plan)
    return plans


def estimate_shapley_many(candidates: list[tuple[int, int]], pool: CandidatePool, state: SubstitutionState,
                          w: int, seed: int, gateway: ModelGateway, target: int) -> list[float]:
    """Monte-Carlo Shapley value of each (position, token) substitution.

    The game's players are the candidate itself plus the most promising substitution at
    every other free position; a coalition's worth is the classifier's logit margin toward
    ``target`` with that coalition applied on top of ``state``.
    """
    plans = _plans(candidates, pool, state, w, seed)
    unique: dict[tuple, int] = {}
    for plan in plans:
        for without, with_c, _ in plan:
            unique.setdefault(without, len(unique))
            unique.setdefault(with_c, len(unique))
    outputs = gateway.classify_batch(list(unique))
    margin = np.array([o.margin(target) for o in outputs])
    return [float(sum(wt * (margin[unique[b]] - margin[unique[a]]) for a, b, wt in plan)) for plan in plans]


def estimate_shapley(candidate: tuple[int, int], pool: CandidatePool, state: SubstitutionState, w: int,
                     seed: int, gateway: ModelGateway, target: int) -> float:
    return estimate_shapley_many([candidate], pool, state, w, seed, gateway, target)[0]


def refine_with_shapley(pool: CandidatePool, state: SubstitutionState, config: SearchConfig,
                        gateway: ModelGateway, target: int) -> CandidatePool:
    flat = [(p, c) for p, cs in pool.items() for c in cs]
    if config.shapley_top is not None:
        flat = sorted(flat, key=lambda pc: (-pc[1].gradient_score, pc[0], pc[1].token))[: config.shapley_top]
    estimates = estimate_shapley_many([(p, c.token) for p, c in flat], pool, state, config.w,
                                      config.seed, gateway, target)
    for (_, cand), est in zip(flat, estimates):
        cand.shapley_estimate = est
    return pool


def closs_generate(example: ExampleRecord, config: SearchConfig, gateway: ModelGateway) -> CounterfactualResult:
    started = time.perf_counter()
    if gateway.mlm is None:
        raise MethodInapplicableError("closs needs a masked language model")
    tokens = gateway.tokenize(example.classifier_input)
    original = gateway.classify_ids(tokens.token_ids)
    target = 1 - original.label
    budget = max_edits(len(tokens), config.substitutions_after_loc)
    try:
        pool = propose_substitutes(tokens, config, gateway, target)
    except GatewayUnavailableError as exc:
        raise MethodInapplicableError(str(exc)) from exc
    root = SubstitutionState(tokens, (), original, original.margin(target))
    refine_with_shapley(pool, root, config, gateway, target)
    values = pool.as_candidates()
    mlm_prob = {(p, c.token): c.mlm_probability for p, cs in pool.items() for c in cs}

    def propose(state: SubstitutionState) -> Candidates:
        return {p: v for p, v in values.items() if p not in state.edited_positions}

    outcome = beam_search(gateway, tokens, original, propose, config.b, budget)
    extra = {"pool_size": sum(len(cs) for cs in pool.values())}
    if outcome.state is not None:
        extra["mlm_probabilities"] = [mlm_prob[e] for e in outcome.state.edits]
    return search_result(example, "closs", gateway, tokens, original, outcome, budget, started, extra)

