import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from vqlattice.lattice import NBestEntry
from vqlattice.lm import EOS, LAMBDA_GRID, NGramLM, lm_score, rescore, train_ngram, tune_lambda
from vqlattice.numerics import ContractError

SYMS = ["a", "b", "c"]


def test_unigram_relative_frequency_in_the_small_k_limit():
    lm = train_ngram([["a", "a", "b"]], SYMS, order=1, k=1e-9)
    # the end marker is an outcome too; among labels a has 2/3 of the mass
    assert lm.prob("a") / (1 - lm.prob(EOS)) == pytest.approx(2 / 3, abs=1e-8)
    assert lm.prob("a") == pytest.approx(2 / 4, abs=1e-8)


def test_add_k_against_hand_counts():
    corpus = [["a", "b"], ["a", "a"], ["b"]]
    lm = train_ngram(corpus, SYMS, order=2, k=0.5)
    # after "a": a x1, b x1, </s> x1 -> total 3; |V| = 4
    assert lm.prob("b", ["a"]) == pytest.approx((1 + 0.5) / (3 + 0.5 * 4))
    assert lm.prob("c", ["a"]) == pytest.approx(0.5 / (3 + 2))
    # after <s>: a x2, b x1
    assert lm.prob("a", []) == pytest.approx(2.5 / (3 + 2))


def test_unseen_context_is_uniform():
    lm = train_ngram([["a", "b"]], SYMS, order=2, k=0.1)
    assert all(p == pytest.approx(1 / 4) for p in lm.distribution(["c"]).values())


@given(st.lists(st.lists(st.sampled_from(SYMS), max_size=6), min_size=1, max_size=6), st.integers(1, 3),
       st.floats(0.01, 2), st.lists(st.sampled_from(SYMS), max_size=3))
def test_distributions_normalize(corpus, order, k, ctx):
    lm = train_ngram(corpus, SYMS, order=order, k=k)
    assert sum(lm.distribution(ctx).values()) == pytest.approx(1.0, abs=1e-9)


def test_score_chain_rule():
    lm = train_ngram([["a", "b", "c"], ["b", "c"]], SYMS, order=3, k=0.2)
    assert lm_score(lm, []) == pytest.approx(math.log(lm.prob(EOS, [])))
    sent = ["b", "c", "a"]
    direct = lm.prob("b", []) * lm.prob("c", ["b"]) * lm.prob("a", ["b", "c"]) * lm.prob(EOS, ["c", "a"])
    assert lm_score(lm, sent) == pytest.approx(math.log(direct), abs=1e-12)
    assert lm_score(lm, sent) == lm_score(lm, sent)


def test_errors():
    with pytest.raises(ContractError):
        train_ngram([], SYMS)
    with pytest.raises(ContractError):
        train_ngram([["z"]], SYMS)
    lm = train_ngram([["a"]], SYMS)
    with pytest.raises(ContractError):
        lm.score(["z"])
    with pytest.raises(ContractError):
        NGramLM(4, 0.1, SYMS)
    with pytest.raises(ContractError):
        NGramLM(2, 0.0, SYMS)
    with pytest.raises(ContractError):
        rescore([], lm, -1.0, SYMS)


def test_save_load_round_trip(tmp_path):
    lm = train_ngram([["a", "b"], ["c"]], SYMS, order=3, k=0.3)
    lm.save(tmp_path / "lm.txt")
    again = NGramLM.load(tmp_path / "lm.txt")
    assert again.dumps() == lm.dumps()
    assert again.score(["a", "c"]) == lm.score(["a", "c"])
    with pytest.raises(ContractError):
        NGramLM.loads("nope\n")


def _entries():
    # acoustic order: (1,), (2,), (1, 1); labels index SYMS from 1
    return [NBestEntry((1,), -1.0), NBestEntry((2,), -1.5), NBestEntry((1, 1), -2.0)]


def test_rescore_lambda_zero_keeps_ranking():
    lm = train_ngram([["b"]] * 5, SYMS, order=1)
    out = rescore(_entries(), lm, 0.0, SYMS)
    assert [e.labels for e in out] == [e.labels for e in _entries()]
    assert all(e.combined == e.acoustic for e in out)
    ties = [NBestEntry((2,), -1.0), NBestEntry((1,), -1.0)]
    assert [e.labels for e in rescore(ties, lm, 0.0, SYMS)] == [(2,), (1,)]


def test_rescore_large_lambda_ranks_by_lm():
    lm = train_ngram([["b"]] * 5 + [["a", "a"]], SYMS, order=1)
    out = rescore(_entries(), lm, 1e6, SYMS)
    assert [e.labels for e in out] == sorted([e.labels for e in _entries()], key=lambda y: -lm.score([SYMS[k - 1] for k in y]))
    for e in out:
        assert e.combined == pytest.approx(e.acoustic + 1e6 * e.lm)


@given(st.floats(0, 5), st.integers(0, 2), st.floats(0.1, 5))
def test_raising_lm_score_never_lowers_rank(lam, which, boost):
    class Shifted:
        def __init__(self, base, target, delta):
            self.base, self.target, self.delta = base, target, delta

        def score(self, sent):
            return self.base.score(sent) + (self.delta if sent == self.target else 0.0)

    lm = train_ngram([["a", "b"], ["c"]], SYMS, order=2)
    entries = _entries()
    target = [SYMS[k - 1] for k in entries[which].labels]
    rank = lambda model: [e.labels for e in rescore(entries, model, lam, SYMS)].index(entries[which].labels)  # noqa: E731
    assert rank(Shifted(lm, target, boost)) <= rank(lm)


def test_tune_lambda_grid_search():
    lm = train_ngram([["b"]] * 5, SYMS, order=1)
    nbests = [_entries(), _entries()]
    refs = [(2,), (2,)]  # the LM prefers "b", acoustics prefer "a"
    lam, table = tune_lambda(nbests, refs, lm, SYMS)
    assert [t[0] for t in table] == list(LAMBDA_GRID)
    best_errors = min(e for _, e in table)
    assert lam == min(l for l, e in table if e == best_errors)
    assert best_errors == 0 and lam > 0
    redo = sum(rescore(nb, lm, lam, SYMS)[0].labels != r for nb, r in zip(nbests, refs))
    assert redo == 0
    # with nothing to gain the smallest weight wins
    assert tune_lambda(nbests, [(1,), (1,)], lm, SYMS)[0] == 0.0
