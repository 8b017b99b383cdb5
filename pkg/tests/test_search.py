import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from oracles import exhaustive_min_flip
from textcf.closs import closs_generate
from textcf.data import ExampleRecord
from textcf.errors import InvalidInputError
from textcf.gateway.core import GradientMatrix, ModelGateway
from textcf.search import (
    CounterfactualResult,
    SearchConfig,
    SubstitutionState,
    beam_step,
    first_order_values,
    hotflip_generate,
    max_edits,
    score_candidates,
)
from textcf.toy import SPECIALS, TableMaskedLM, random_linear_classifier


def linear_world(seed, vocab_size=12, length=6):
    rng = np.random.default_rng(seed)
    clf = random_linear_classifier(rng, vocab_size)
    words = clf.vocab[len(SPECIALS):]
    text = " ".join(rng.choice(words, size=length))
    return ModelGateway(classifier=clf), ExampleRecord(f"lin-{seed}", "sst2", 0, text=text)


def full_vocab_mlm(gateway, tokens):
    n = gateway.classifier.vocab_size
    specials = gateway.classifier.special_ids
    row = [(t, 1.0 / n) for t in range(n) if t not in specials]
    return TableMaskedLM({p: row for p in range(len(tokens))})


def root_state(gateway, text, target):
    toks = gateway.tokenize(text)
    out = gateway.classify_ids(toks.token_ids)
    return SubstitutionState(toks, (), out, out.margin(target))


@pytest.mark.parametrize("n,frac,expected", [(1, 0.3, 1), (3, 0.3, 1), (10, 0.3, 3), (7, 0.5, 3), (4, 1.0, 4)])
def test_max_edits(n, frac, expected):
    assert max_edits(n, frac) == expected


def test_search_config_validation():
    with pytest.raises(InvalidInputError):
        SearchConfig(b=0)
    with pytest.raises(InvalidInputError):
        SearchConfig(t=0.0)


def test_self_replacement_scores_zero(gateway):
    toks = gateway.tokenize("the movie was great")
    vals = first_order_values(gateway.embedding_matrix(), gateway.margin_gradients(toks, 0), toks.token_ids)
    assert np.allclose(vals[np.arange(len(toks)), list(toks.token_ids)], 0.0)


def test_zero_gradients_give_zero_values(gateway):
    toks = gateway.tokenize("the movie was great")
    zero = GradientMatrix(np.zeros((len(toks), gateway.embedding_matrix().shape[1])), 0)
    assert not first_order_values(gateway.embedding_matrix(), zero, toks.token_ids).any()


@pytest.mark.parametrize("seed", range(5))
def test_first_order_exact_on_linear_model(seed):
    g, ex = linear_world(seed)
    toks = g.tokenize(ex.text)
    target = 1 - g.classify(ex.text).label
    vals = first_order_values(g.embedding_matrix(), g.margin_gradients(toks, target), toks.token_ids)
    base = g.classify_ids(toks.token_ids).margin(target)
    for p in range(len(toks)):
        for v in range(g.classifier.vocab_size):
            m = g.classify_ids(toks.substituted_ids([(p, v)])).margin(target)
            assert vals[p, v] == pytest.approx(m - base, abs=1e-9)


def test_score_candidates_respects_mask_and_k(gateway):
    state = root_state(gateway, "the movie was great", 0)
    cands = score_candidates(state, gateway.margin_gradients(state.sequence(), 0), 5, gateway)
    special = gateway.classifier.special_ids
    for p, opts in cands.items():
        assert len(opts) == 5
        assert all(t not in special and t != state.token_ids[p] for t, _ in opts)
        assert [v for _, v in opts] == sorted((v for _, v in opts), reverse=True)


def _enumerate_children(beams, candidates):
    kids = {}
    for beam, cands in zip(beams, candidates):
        for p, opts in cands.items():
            if p in beam.edited_positions:
                continue
            for t, v in opts:
                e = tuple(sorted(beam.edits + ((p, t),)))
                kids[e] = max(kids.get(e, -math.inf), beam.score + v)
    return kids


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_beam_step_keeps_best_children(seed, b):
    rng = np.random.default_rng(seed)
    g, ex = linear_world(seed, length=4)
    target = 1 - g.classify(ex.text).label
    root = root_state(g, ex.text, target)
    cands = [{p: [(int(t), float(rng.normal())) for t in rng.choice(np.arange(2, 12), 3, replace=False)]
              for p in range(4)}]
    kept = beam_step([root], cands, b, g, target)
    kids = _enumerate_children([root], cands)
    expect = sorted(kids, key=lambda e: (-kids[e], e))[:b]
    assert [s.edits for s in kept] == expect
    for s in kept:
        assert s.score == pytest.approx(g.classify_ids(s.token_ids).margin(target))


def test_beam_step_large_b_keeps_everything_and_budget_blocks():
    g, ex = linear_world(1, length=3)
    root = root_state(g, ex.text, 1)
    cands = [{p: [(2, 0.1), (3, 0.2)] for p in range(3)}]
    assert len(beam_step([root], cands, 100, g, 1)) == 6
    assert beam_step([root], cands, 100, g, 1, budget=0) == []
    with pytest.raises(InvalidInputError):
        beam_step([], [], 1, g, 1)


def test_hotflip_single_decisive_word(gateway):
    ex = ExampleRecord("s1", "sst2", 1, text="i loved the movie")
    r = hotflip_generate(ex, SearchConfig(), gateway)
    assert r.flipped and r.edits_made == 1
    assert r.counterfactual_text.split()[1] in ("hated", "disliked")
    assert gateway.classify(r.counterfactual_text).label == 0
    assert r.metadata["edits"][0][:2] == [1, "loved"]


def test_hotflip_budget_exhausted_reports_failure(gateway):
    # margin 3*3 + 0.2: one edit (of one allowed) can move it by at most ~6
    ex = ExampleRecord("s2", "sst2", 1, text="loved adored wonderful")
    r = hotflip_generate(ex, SearchConfig(t=0.34), gateway)
    assert not r.flipped and r.failure_reason == "budget_exhausted" and r.counterfactual_text is None


def test_result_invariants():
    with pytest.raises(ValueError):
        CounterfactualResult("e", "m", "a", 0, "b", 1, flipped=False)
    with pytest.raises(ValueError):
        CounterfactualResult("e", "m", "a", 0, "b", 0, flipped=False)
    ok = CounterfactualResult.from_classification("e", "m", "a", 0, "b", 1, edits_made=1)
    assert CounterfactualResult.from_json(ok.to_json()) == ok


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 100_000), st.integers(3, 7))
def test_search_matches_exhaustive_oracle(seed, length):
    g, ex = linear_world(seed, length=length)
    toks = g.tokenize(ex.text)
    cfg = SearchConfig(t=0.3, substitutions_after_loc=0.3, w=50)
    budget = max_edits(len(toks), 0.3)
    best = exhaustive_min_flip(g, toks, budget)
    hf = hotflip_generate(ex, cfg, g)
    g.mlm = full_vocab_mlm(g, toks)
    cl = closs_generate(ex, SearchConfig(t=0.3, substitutions_after_loc=0.3, w=50, k=20), g)
    for r in (hf, cl):
        assert r.flipped == (best is not None)
        assert r.edits_made == best if best is not None else r.edits_made is None
        assert (r.edits_made or 0) <= budget
