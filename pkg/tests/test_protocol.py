import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import coherent_gram

from sdiqkd.protocol import (
    DegenerateProtocolError,
    GramConstraint,
    ProtocolSpec,
    StatTable,
    conclusive_overlap,
    encoding_pairs,
    gram_matrix,
    ideal_statistics,
    orthogonal,
    polarization,
    sift,
)

mus = st.floats(0.0, 50.0)
thetas = st.floats(0.0, math.pi)


def test_spec_validation():
    with pytest.raises(ValueError):
        ProtocolSpec(1, 0.2, 1.0)
    with pytest.raises(ValueError):
        ProtocolSpec(2, 4.0, 1.0)
    with pytest.raises(ValueError):
        ProtocolSpec(2, 0.2, -1.0)
    with pytest.raises(ValueError):
        ProtocolSpec(2, 0.2, 1.0, p_k=(0.7, 0.7))
    spec = ProtocolSpec(3, 0.2, 1.0)
    assert spec.phase_step == pytest.approx(2 * math.pi / 3)
    assert spec.p_r == pytest.approx((1 / 3,) * 3)


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_encoding_pairs(n):
    pairs = encoding_pairs(n)
    assert len(pairs) == n * (n - 1) // 2
    assert all(0 <= a < b < n for a, b in pairs)


def test_gram_vacuum_is_all_ones():
    assert np.allclose(gram_matrix(ProtocolSpec(2, 1.1, 0.0)), 1.0)


def test_gram_n2_value():
    g = gram_matrix(ProtocolSpec(2, 0.6, 1.0))
    assert g[0, 1] == pytest.approx(math.exp(-2 * math.sin(0.3) ** 2), abs=1e-12)
    assert g[0, 1] == pytest.approx(0.8397, abs=1e-4)


def test_gram_n3_value():
    g = gram_matrix(ProtocolSpec(3, 0.7, 0.647))
    assert g[0, 1].real == pytest.approx(0.8902, abs=1e-4)
    assert g[0, 1].imag == pytest.approx(0.0587, abs=1e-4)
    assert np.allclose(g, coherent_gram(3, 0.647, 0.7), atol=1e-12)


@given(mus, thetas, st.integers(2, 5))
def test_gram_is_hermitian_unit_psd_and_matches_inner_products(mu, theta, n):
    g = gram_matrix(ProtocolSpec(n, theta, mu))
    assert np.allclose(g, g.conj().T, atol=1e-14)
    assert np.allclose(np.diag(g), 1.0)
    assert np.linalg.eigvalsh(g).min() >= -1e-10
    assert np.allclose(g, coherent_gram(n, mu, theta), atol=1e-12)


def test_gram_constraint_validation():
    with pytest.raises(ValueError):
        GramConstraint(np.array([[1, 2], [2, 1]]))
    with pytest.raises(ValueError):
        GramConstraint(np.array([[1, 0.5], [0.4, 1]]))
    with pytest.raises(ValueError):
        GramConstraint(np.eye(2), epsilon=0.1)
    assert GramConstraint(np.eye(2), epsilon=0.1, mode="box").epsilon == 0.1


def test_ideal_statistics_examples():
    spec = ProtocolSpec(2, 0.6, 1.0)
    p0 = ideal_statistics(spec).p0
    assert p0[0, 0] == 0.0 and p0[1, 1] == 0.0
    assert p0[0, 1] == pytest.approx(1 - math.exp(-math.sin(0.6) ** 2), rel=1e-12)
    assert p0[0, 1] == pytest.approx(0.2730, abs=1e-4)
    assert np.all(ideal_statistics(spec, 0.0).p0 == 0.0)


@given(thetas, st.integers(2, 5))
def test_conclusive_overlap_matches_jones_vectors(theta, n):
    spec = ProtocolSpec(n, theta, 1.0)
    amp = np.array(
        [[abs(np.vdot(orthogonal(polarization(theta, y * spec.phase_step)), polarization(theta, x * spec.phase_step))) ** 2
          for y in range(n)] for x in range(n)]
    )  # fmt: skip
    assert np.allclose(conclusive_overlap(spec), amp, atol=1e-12)


@given(mus, thetas, st.integers(2, 5), st.floats(0.0, 1.0))
def test_ideal_statistics_cyclic_symmetry(mu, theta, n, eta):
    p0 = ideal_statistics(ProtocolSpec(n, theta, mu), eta).p0
    assert np.allclose(np.roll(np.roll(p0, 1, axis=0), 1, axis=1), p0, atol=1e-15)
    assert np.all(np.diag(p0) == 0.0)


def test_sift_examples():
    spec = ProtocolSpec(2, 0.6, 1.0)
    p_succ, qber = sift(spec, ideal_statistics(spec))
    assert qber == 0.0
    assert p_succ == pytest.approx(0.25 * 2 * (1 - math.exp(-math.sin(0.6) ** 2)), rel=1e-12)
    assert p_succ == pytest.approx(0.1365, abs=1e-4)
    _, qber = sift(spec, StatTable.from_probabilities(np.full((2, 2), 0.3)))
    assert qber == pytest.approx(0.5)
    with pytest.raises(DegenerateProtocolError):
        sift(spec, ideal_statistics(spec, 0.0))


def test_sifting_weights_are_a_distribution_over_conclusive_events():
    spec = ProtocolSpec(4, 0.3, 1.0, p_y=(0.1, 0.2, 0.3, 0.4))
    succ, err = spec.sifting_weights()
    # with every cell clicking, p_succ is the probability that y lies in r
    expect = sum(pr * (spec.p_y[a] + spec.p_y[b]) for pr, (a, b) in zip(spec.p_r, spec.pairs))
    assert succ.sum() == pytest.approx(expect)
    assert np.all(err <= succ)
    assert np.count_nonzero(err - np.diag(np.diag(err))) == 0


def test_stat_table_csv_round_trip(tmp_path):
    counts = np.arange(18).reshape(2, 3, 3)
    t = StatTable.from_counts(counts)
    t.write(tmp_path / "c.csv")
    back = StatTable.read(tmp_path / "c.csv")
    assert np.array_equal(back.counts, counts) and back.N == counts.sum()
    p = StatTable.from_probabilities([[0.0, 0.1 + 0.2], [1 / 3, 0.0]])
    assert np.array_equal(StatTable.from_csv(p.to_csv()).p0, p.p0)
    assert p.to_csv().splitlines()[0] == "b,x,y,prob"


def test_stat_table_validation():
    with pytest.raises(ValueError):
        StatTable.from_probabilities([[0.0, 1.2], [0.0, 0.0]])
    with pytest.raises(ValueError):
        StatTable.from_counts(-np.ones((2, 2, 2)))
    with pytest.raises(ValueError):
        StatTable.from_counts(np.zeros((2, 2, 2))).conditional()
    with pytest.raises(ValueError):
        StatTable.from_csv("a,b\n1,2\n")
