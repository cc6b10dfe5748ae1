import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdkd.lattice import (
    Alignment,
    OutputLattice,
    Vocab,
    lattice_from_logits,
    load_lattice,
    logsumexp,
    node_logprob,
    random_lattice,
    save_lattice,
    uniform_lattice,
    validate_lattice,
)

from oracles import all_alignments


def test_logsumexp_normalized_pair():
    assert logsumexp([math.log(0.5), math.log(0.5)]) == pytest.approx(0.0, abs=1e-12)


def test_logsumexp_neg_inf_identity():
    a = -1.234
    assert logsumexp([float("-inf"), a]) == pytest.approx(a, abs=1e-12)


def test_logsumexp_equal_terms():
    assert logsumexp([0.0, 0.0, 0.0]) == pytest.approx(math.log(3), abs=1e-12)


def test_logsumexp_all_neg_inf():
    assert logsumexp([float("-inf")] * 4) == float("-inf")


def test_logsumexp_empty_rejected():
    with pytest.raises(ValueError):
        logsumexp([])


@given(st.lists(st.floats(min_value=-30, max_value=30), min_size=1, max_size=12), st.randoms())
def test_logsumexp_permutation_invariant(xs, rnd):
    shuffled = xs[:]
    rnd.shuffle(shuffled)
    assert logsumexp(shuffled) == pytest.approx(logsumexp(xs), abs=1e-12)


@given(
    st.lists(st.floats(min_value=-30, max_value=30), min_size=1, max_size=12),
    st.floats(min_value=-50, max_value=50),
)
def test_logsumexp_shift(xs, c):
    assert logsumexp([x + c for x in xs]) == pytest.approx(logsumexp(xs) + c, abs=1e-12)


def test_vocab_invariants():
    v = Vocab(5)
    assert v.blank_id == 0
    assert list(v.tokens) == [1, 2, 3, 4]
    with pytest.raises(ValueError):
        Vocab(1)
    with pytest.raises(ValueError):
        Vocab(5, blank_id=2)


def test_node_logprob_uniform():
    lat = uniform_lattice(3, 2, 4)
    assert node_logprob(lat, 1, 2, 3) == pytest.approx(-math.log(4), abs=1e-12)


def test_node_logprob_onehot_blank():
    values = np.full((1, 1, 3), float("-inf"))
    values[0, 0, 0] = 0.0
    lat = OutputLattice(values)
    assert node_logprob(lat, 0, 0, 0) == 0.0


def test_node_logprob_matches_manual_softmax():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(2, 3, 5))
    lat = lattice_from_logits(logits)
    z = logits[1, 2]
    expected = z[4] - math.log(np.sum(np.exp(z)))
    assert node_logprob(lat, 1, 2, 4) == pytest.approx(expected, abs=1e-12)


def test_node_logprob_out_of_range():
    lat = uniform_lattice(2, 1, 3)
    with pytest.raises(IndexError):
        node_logprob(lat, 2, 0, 0)
    with pytest.raises(IndexError):
        node_logprob(lat, 0, 2, 0)


def test_validate_softmax_lattice_ok():
    lat = random_lattice(np.random.default_rng(0), 4, 3, 5)
    report = validate_lattice(lat)
    assert report.ok
    assert report.max_residual < 1e-12


def test_validate_flags_denormalized_node():
    lat = random_lattice(np.random.default_rng(1), 3, 2, 4)
    values = lat.values.copy()
    values[1, 2, :] += math.log(2.0)  # scales that node's mass by 2
    report = validate_lattice(OutputLattice(values))
    assert not report.ok
    assert report.worst_node == (1, 2)
    assert report.max_residual == pytest.approx(math.log(2.0), abs=1e-9)


def test_validate_residual_is_node_logsumexp():
    values = uniform_lattice(1, 0, 2).values.copy()
    values[0, 0, :] = [math.log(0.4), math.log(0.4)]
    report = validate_lattice(OutputLattice(values))
    assert report.max_residual == pytest.approx(abs(math.log(0.8)), abs=1e-12)


@pytest.mark.parametrize("T,U", [(1, 0), (2, 1), (3, 2), (4, 4), (6, 5), (6, 6)])
def test_alignment_enumeration(T, U):
    paths = all_alignments(T, U)
    # T blank steps and U label steps everywhere; the final frame-consuming
    # blank forces the count to C(T+U-1, U).
    assert len(paths) == math.comb(T + U - 1, U)
    for p in paths:
        assert len(p) == T + U
        assert sum(1 for _, _, is_label in p if not is_label) == T


def test_alignment_validate_accepts_enumerated_paths():
    tokens = (2, 1)
    for p in all_alignments(3, 2):
        a = Alignment(tuple((t, u, tokens[u] if is_label else 0) for t, u, is_label in p))
        a.validate(3, 2, tokens)


def test_alignment_validate_rejects_broken_paths():
    a = Alignment(((0, 0, 0), (0, 1, 1)))
    with pytest.raises(ValueError):
        a.validate(2, 0)
    b = Alignment(((0, 0, 1), (0, 1, 0), (1, 1, 0)))
    with pytest.raises(ValueError):
        b.validate(2, 1, (2,))  # emits token 1 where the reference has 2


def test_lattice_dump_load_roundtrip(tmp_path):
    lat = random_lattice(np.random.default_rng(3), 5, 3, 6)
    path = tmp_path / "lat.bin"
    save_lattice(lat, path)
    back = load_lattice(path)
    assert back.values.shape == lat.values.shape
    assert np.array_equal(back.values, lat.values)


def test_lattice_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_lattice(path)


@settings(max_examples=25)
@given(st.integers(min_value=1, max_value=4), st.integers(min_value=0, max_value=3), st.integers(min_value=0, max_value=10**6))
def test_lattice_stays_normalized_after_reads(T, U, seed):
    lat = random_lattice(np.random.default_rng(seed), T, U, 3)
    node_logprob(lat, T - 1, U, 2)
    report = validate_lattice(lat)
    assert report.ok
