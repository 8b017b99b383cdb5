import itertools

import numpy as np
import pytest
import torch

from oracles import exact_shapley
from textcf.closs import Candidate, CandidatePool, closs_generate, estimate_shapley, estimate_shapley_many, propose_substitutes
from textcf.data import ExampleRecord
from textcf.errors import MethodInapplicableError
from textcf.gateway.core import ModelGateway
from textcf.search import SearchConfig, SubstitutionState
from textcf.toy import SPECIALS, TableMaskedLM, WordClassifier


class PairwiseHead(torch.nn.Module):
    """margin = sum_p a[x_p] + sum_{p<q} B[x_p, x_q]: a non-additive game with known structure."""

    def __init__(self, a, B):
        super().__init__()
        self.a = torch.as_tensor(a)
        self.B = torch.as_tensor(B)

    def forward(self, embeds):
        # embeddings are one-hot rows, so token ids are recoverable
        ids = embeds.argmax(dim=-1)
        out = []
        for row in ids:
            m = self.a[row].sum()
            for p, q in itertools.combinations(range(len(row)), 2):
                m = m + self.B[row[p], row[q]]
            out.append(torch.stack([-m / 2, m / 2]))
        return torch.stack(out)


def game_world(seed, n_pos):
    """n_pos positions, each with one alternative token; returns gateway, state, pool."""
    rng = np.random.default_rng(seed)
    V = len(SPECIALS) + 2 * n_pos
    vocab = [*SPECIALS, *[f"t{i}" for i in range(V - len(SPECIALS))]]
    clf = WordClassifier(vocab, np.eye(V), PairwiseHead(rng.normal(size=V), rng.normal(size=(V, V))))
    text = " ".join(f"t{2 * i}" for i in range(n_pos))
    g = ModelGateway(classifier=clf)
    toks = g.tokenize(text)
    out = g.classify_ids(toks.token_ids)
    state = SubstitutionState(toks, (), out, out.margin(1))
    pool = CandidatePool({p: [Candidate(toks.token_ids[p] + 1, 1.0, 0.0)] for p in range(n_pos)})
    return g, state, pool


def exact_game_values(g, state, pool, target=1):
    players = [(p, cs[0].token) for p, cs in sorted(pool.items())]

    def worth(coalition):
        ids = state.base.substituted_ids([players[i] for i in coalition])
        return g.classify_ids(ids).margin(target)

    return players, exact_shapley(len(players), worth)


def test_single_player_value_is_exact():
    g, state, pool = game_world(0, 1)
    players, phi = exact_game_values(g, state, pool)
    assert estimate_shapley(players[0], pool, state, 3, 0, g, 1) == pytest.approx(phi[0])


@pytest.mark.parametrize("seed", range(5))
def test_estimates_close_to_enumeration(seed):
    g, state, pool = game_world(seed, 4)
    players, phi = exact_game_values(g, state, pool)
    est = estimate_shapley_many(players, pool, state, 200, seed, g, 1)
    assert np.max(np.abs(np.array(est) - phi)) < 0.05


def test_estimator_unbiased_over_seeds():
    g, state, pool = game_world(11, 3)
    players, phi = exact_game_values(g, state, pool)
    runs = np.array([estimate_shapley_many(players, pool, state, 7, s, g, 1) for s in range(300)])
    se = runs.std(axis=0) / np.sqrt(len(runs)) + 1e-9
    assert np.all(np.abs(runs.mean(axis=0) - phi) < 4 * se + 1e-9)


def test_efficiency_on_enumerated_values():
    g, state, pool = game_world(3, 3)
    players, phi = exact_game_values(g, state, pool)
    full = g.classify_ids(state.base.substituted_ids(players)).margin(1)
    assert phi.sum() == pytest.approx(full - state.score)


def test_symmetric_players_get_equal_estimates():
    g, state, pool = game_world(0, 3)
    # make positions 0 and 1 interchangeable: same alternative, same pairwise terms
    head = g.classifier.head
    t0, t1 = state.base.token_ids[0], state.base.token_ids[1]
    alt = pool[0][0].token
    pool[1] = [Candidate(alt, 1.0, 0.0)]
    head.a[t1] = head.a[t0]
    head.B[:, :] = 0.0
    est = estimate_shapley_many([(0, alt), (1, alt)], pool, state, 50, 0, g, 1)
    assert est[0] == pytest.approx(est[1])


def test_estimates_deterministic_per_seed():
    g, state, pool = game_world(2, 4)
    players, _ = exact_game_values(g, state, pool)
    assert estimate_shapley_many(players, pool, state, 20, 5, g, 1) == estimate_shapley_many(players, pool, state, 20, 5, g, 1)


def test_propose_excludes_current_special_and_respects_k(gateway):
    toks = gateway.tokenize("the movie was great")
    pool = propose_substitutes(toks, SearchConfig(k=1), gateway, 0)
    assert set(pool) == {0, 1, 2, 3}
    special = gateway.classifier.special_ids
    for p, cs in pool.items():
        assert len(cs) <= 1
        assert all(c.token != toks.token_ids[p] and c.token not in special for c in cs)


def test_special_positions_never_edited(gateway):
    toks = gateway.tokenize("what is the plot ? [SEP] the plot was great")
    pool = propose_substitutes(toks, SearchConfig(), gateway, 0)
    sep = list(toks.surface_tokens).index("[SEP]")
    assert sep not in pool
    ex = ExampleRecord("q", "qnli", 1, question="what is the plot ?", sentence="the plot was great")
    r = closs_generate(ex, SearchConfig(), gateway)
    assert r.flipped and r.counterfactual_text.count(" [SEP] ") == 1


def test_closs_flips_with_lexicon_mlm(gateway):
    ex = ExampleRecord("s", "sst2", 1, text="the acting was wonderful and fun")
    r = closs_generate(ex, SearchConfig(), gateway)
    assert r.flipped and r.edits_made <= 1
    assert len(r.metadata["mlm_probabilities"]) == r.edits_made


def test_closs_needs_mlm(gateway):
    gateway.mlm = None
    with pytest.raises(MethodInapplicableError):
        closs_generate(ExampleRecord("s", "sst2", 1, text="good"), SearchConfig(), gateway)


def test_empty_candidate_pool_fails_cleanly(gateway):
    gateway.mlm = TableMaskedLM({})
    r = closs_generate(ExampleRecord("s", "sst2", 1, text="the movie was great"), SearchConfig(), gateway)
    assert not r.flipped and r.failure_reason == "budget_exhausted"
