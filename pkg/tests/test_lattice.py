import functools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqlattice.decoder import DecoderConfig, MergeStrategy, decode
from vqlattice.lattice import (
    FINAL,
    Emission,
    Lattice,
    LatticeError,
    best_path,
    count_paths,
    density,
    dumps,
    edit_distance,
    enumerate_paths,
    extract_nbest,
    loads,
    oracle_wer,
    prune_lattice,
    update_lattice,
    validate,
)
from vqlattice.loss import forward_backward_nll
from vqlattice.numerics import ContractError

from conftest import tiny_model


@st.composite
def random_lattices(draw, max_inner=6, labels=3):
    """Random valid DAG; inner nodes are ordered so arcs only go forward."""
    n = draw(st.integers(0, max_inner))
    seq = [0] + list(range(2, n + 2)) + [1]
    lat = Lattice(draw(st.integers(1, 6)), [chr(ord("a") + k) for k in range(labels)])
    lat.num_nodes = n + 2
    weight = st.integers(-40, 0).map(lambda k: k / 8)  # dyadic: path sums are exact
    for a, b in zip(seq, seq[1:]):  # a chain keeps every node on a path
        lab = FINAL if b == 1 else draw(st.integers(1, labels))
        lat.add_arc(a, b, lab, draw(weight))
    for _ in range(draw(st.integers(0, 10))):
        i = draw(st.integers(0, len(seq) - 2))
        j = draw(st.integers(i + 1, len(seq) - 1))
        lab = FINAL if seq[j] == 1 else draw(st.integers(1, labels))
        lat.add_arc(seq[i], seq[j], lab, draw(weight))
    return lat


def simple_lattice():
    lat = Lattice(5, ["a", "b"])
    n2, n3 = lat.add_node(), lat.add_node()
    lat.add_arc(0, n2, 1, math.log(0.5))
    lat.add_arc(0, n2, 2, math.log(0.01))
    lat.add_arc(n2, n3, 2, -0.2)
    lat.add_arc(n3, 1, FINAL, -0.1)
    lat.add_arc(n2, 1, FINAL, -3.0)
    return lat


# -- update_lattice ---------------------------------------------------------------


def test_update_without_merges_builds_a_prefix_tree():
    lat = Lattice(3)
    (a, b) = update_lattice(lat, [[Emission(0, 1, -0.5)], [Emission(0, 2, -1.0)]])
    (c, b2) = update_lattice(lat, [[Emission(a, 2, -0.3)], [Emission(None, None, -0.7, b)]])
    assert b2 == b  # an unmerged blank stays on its node
    assert len({a, b, c}) == 3
    assert all(len(lat.in_arcs(n)) == 1 for n in (a, b, c))


def test_update_joins_two_prefixes_into_one_node():
    # "w" and "o" prefixes whose next states share a code meet in one node
    lat = Lattice(4, ["w", "o", "x"])
    w, o = update_lattice(lat, [[Emission(0, 1, -0.4)], [Emission(0, 2, -0.9)]])
    (shared,) = update_lattice(lat, [[Emission(w, 3, -0.2), Emission(o, 3, -0.6)]])
    ins = lat.in_arcs(shared)
    assert {a.src for a in ins} == {w, o}
    assert sorted(a.weight for a in ins) == [-0.6, -0.2]


def test_blank_member_reroutes_in_arcs_with_its_pending_mass():
    lat = Lattice(4)
    (a,) = update_lattice(lat, [[Emission(0, 1, -0.5)]])
    (b,) = update_lattice(lat, [[Emission(0, 2, -1.0)]])
    (m,) = update_lattice(lat, [[Emission(None, None, -0.25, a), Emission(0, 1, -2.0)]])
    assert sorted((x.src, x.label, x.weight) for x in lat.in_arcs(m)) == [(0, 1, -2.0), (0, 1, -0.75)]
    with pytest.raises(LatticeError):
        update_lattice(lat, [[Emission(None, None, -0.1, 0), Emission(b, 1, -0.1)]])
    with pytest.raises(LatticeError):
        lat.add_arc(0, 99, 1, 0.0)


def test_exhaustive_tree_search_path_scores_are_sequence_posteriors():
    model = tiny_model("lstm", num_labels=2, seed=3)
    x = np.random.default_rng(5).normal(size=(3, 4))
    res = decode(model, x, DecoderConfig(beam=10**6, u_max_ratio=2 / 3, strategy=MergeStrategy("none")))
    # the best path of each label sequence replays that sequence's total score
    for e in extract_nbest(res.lattice, 100):
        ref = -forward_backward_nll(model.log_prob_grid(x, e.labels), e.labels)
        assert e.acoustic == pytest.approx(ref, abs=1e-9)


# -- validate -----------------------------------------------------------------------


def test_validate_flags_cycles_and_dead_ends():
    lat = simple_lattice()
    assert validate(lat).ok
    cyc = lat.copy()
    cyc.add_arc(3, 2, 1, -1.0)
    rep = validate(cyc)
    assert not rep.checks["acyclic"] and "cycle" in rep.to_text()
    dead = lat.copy()
    dead.add_node()
    dead.add_arc(2, 4, 1, -1.0)
    rep = validate(dead)
    assert rep.checks["acyclic"] and not rep.checks["coreachable"]
    bad = lat.copy()
    bad.add_arc(2, 3, 1, float("-inf"))
    assert not validate(bad).checks["finite_weights"]


# -- density ------------------------------------------------------------------------


def test_density_counts_arcs_per_frame():
    lat = Lattice(5)
    lat.num_nodes = 12
    for k in range(10):
        lat.add_arc(0, k + 2, 1, 0.0)
    assert density(lat) == 2.0
    with pytest.raises(LatticeError):
        density(Lattice(0))


def test_single_beam_density_counts_emitted_labels():
    model = tiny_model("lstm", num_labels=3, seed=2)
    x = np.random.default_rng(0).normal(size=(6, 4))
    res = decode(model, x, DecoderConfig(beam=1, strategy=MergeStrategy("none")))
    assert density(res.lattice) == pytest.approx((len(res.best.labels) + 1) / 6)


@pytest.mark.parametrize("seed", range(4))
def test_density_grows_with_beam_on_fixed_utterance(seed):
    model = tiny_model("vq_lstm", num_labels=3, seed=seed, vq_vars=2)
    x = np.random.default_rng(seed).normal(size=(6, 4))
    ds = [density(decode(model, x, DecoderConfig(beam=H, strategy=MergeStrategy("vq_state"))).lattice) for H in (1, 2, 4, 8, 16)]
    assert ds == sorted(ds)


# -- edit distance and oracle ----------------------------------------------------------


def test_edit_distance_examples():
    assert edit_distance("abc", "abc") == 0
    assert edit_distance("a b c".split(), "a x c".split()) == 1
    assert edit_distance("", "abc") == 3


def _levenshtein(a, b):
    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


@given(st.lists(st.integers(0, 3), max_size=8), st.lists(st.integers(0, 3), max_size=8))
def test_edit_distance_matches_recursive_oracle(a, b):
    assert edit_distance(a, b) == _levenshtein(tuple(a), tuple(b))


@settings(max_examples=150)
@given(random_lattices(), st.lists(st.integers(1, 3), min_size=1, max_size=5))
def test_oracle_matches_path_enumeration(lat, ref):
    paths = enumerate_paths(lat)
    brute = min(edit_distance(p, ref) for p, _ in paths) / len(ref)
    wer, labels = oracle_wer(lat, ref)
    assert wer == brute
    assert any(p == labels for p, _ in paths)
    assert edit_distance(labels, ref) / len(ref) == wer


def test_oracle_simple_cases():
    lat = simple_lattice()
    assert oracle_wer(lat, (1, 2)) == (0.0, (1, 2))
    chain = Lattice(2)
    chain.num_nodes = 3
    chain.add_arc(0, 2, 2, 0.0)
    chain.add_arc(2, 1, FINAL, 0.0)
    assert oracle_wer(chain, (1, 1))[0] == edit_distance((2,), (1, 1)) / 2
    with pytest.raises(ContractError):
        oracle_wer(lat, ())
    cyc = lat.copy()
    cyc.add_arc(3, 2, 1, 0.0)
    with pytest.raises(LatticeError):
        oracle_wer(cyc, (1,))


@settings(max_examples=100)
@given(random_lattices(), st.lists(st.integers(1, 3), min_size=1, max_size=5), st.integers(1, 3), st.integers(0, 99))
def test_oracle_monotone_in_arcs(lat, ref, label, pick):
    before = oracle_wer(lat, ref)[0]
    a = lat.arcs[pick % len(lat.arcs)]
    grown = lat.copy()
    if a.dst != lat.end:
        grown.add_arc(a.src, a.dst, label, -1.0)
    assert oracle_wer(grown, ref)[0] <= before
    assert oracle_wer(prune_lattice(lat, 0.0), ref)[0] >= before
    best, _ = best_path(lat)
    assert before <= edit_distance(best, ref) / len(ref)


# -- pruning ----------------------------------------------------------------------------


def test_prune_examples():
    lat = simple_lattice()
    assert sorted(prune_lattice(lat, 1e6).arcs) == sorted(lat.arcs)
    kept = prune_lattice(lat, 0.0)
    parallel = [a for a in kept.arcs if (a.src, a.dst) == (0, 2)]
    assert [a.weight for a in parallel] == [math.log(0.5)]
    with pytest.raises(ContractError):
        prune_lattice(lat, -0.1)


@settings(max_examples=150)
@given(random_lattices(), st.floats(0, 2))
def test_prune_preserves_best_path(lat, margin):
    labels, score = best_path(lat)
    pruned = prune_lattice(lat, margin)
    assert validate(pruned).ok
    assert best_path(pruned)[1] == score
    # with exact ties the Viterbi string is ambiguous; the original must stay optimal
    assert max(s for y, s in enumerate_paths(pruned) if y == labels) == score


# -- n-best ------------------------------------------------------------------------------


@settings(max_examples=150)
@given(random_lattices())
def test_nbest_matches_enumeration(lat):
    best = {}
    for labels, s in enumerate_paths(lat):
        best[labels] = max(best.get(labels, -np.inf), s)
    expected = sorted(best.items(), key=lambda p: (-p[1], len(p[0]), p[0]))
    got = extract_nbest(lat, len(best) + 5)
    assert [e.labels for e in got] == [p[0] for p in expected]
    assert np.allclose([e.acoustic for e in got], [p[1] for p in expected], atol=1e-12)
    assert len(extract_nbest(lat, 1)) == 1
    assert extract_nbest(lat, 1)[0].acoustic == pytest.approx(expected[0][1])


def test_nbest_rejects_zero():
    with pytest.raises(ContractError):
        extract_nbest(simple_lattice(), 0)


def test_count_paths():
    assert count_paths(simple_lattice()) == len(enumerate_paths(simple_lattice())) == 4


# -- serialization -----------------------------------------------------------------------


@given(random_lattices())
def test_text_round_trip_is_byte_exact(lat):
    text = dumps(lat, "abc123")
    again = loads(text, lat.symbols)
    assert dumps(again, "abc123") == text
    assert again.num_nodes == lat.num_nodes and again.end == lat.end


def test_text_format_layout():
    text = dumps(simple_lattice()).splitlines()
    assert text[0] == "#vqlattice-lattice v1 T=5 vocab=- start=0 nodes=4"
    assert text[1] == "0 2 a 0.693147181"
    assert text[-1] == "final 1"
    with pytest.raises(LatticeError):
        loads("garbage\n")
