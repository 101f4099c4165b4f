import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import binom

from sdiqkd.channel import ChannelModel, noisy_statistics, simulate
from sdiqkd.moments import build_problem
from sdiqkd.protocol import GramConstraint, ProtocolSpec, StatTable, ideal_statistics, sift
from sdiqkd.sdp import solve, verify_certificate
from sdiqkd.security import (
    asymptotic_keyrate,
    asymptotic_report,
    binary_entropy,
    certify_counts,
    clopper_pearson,
    finite_size_error_bound,
    finite_size_pg_bound,
    finite_size_psucc_bound,
    finite_size_report,
    fit_certificate,
)


def test_binary_entropy():
    assert binary_entropy(0.0) == 0.0 and binary_entropy(1.0) == 0.0
    assert binary_entropy(0.5) == 1.0
    assert binary_entropy(0.11) == pytest.approx(0.4999, abs=1e-4)
    with pytest.raises(ValueError):
        binary_entropy(1.1)


def test_asymptotic_keyrate_examples():
    assert asymptotic_keyrate(1.0, 0.0, 0.3)[0] == 0.0
    assert asymptotic_keyrate(0.5, 0.0, 0.1365)[0] == pytest.approx(0.1365)
    R, raw = asymptotic_keyrate(0.6, 0.5, 0.2)
    assert R == 0.0 and raw < 0


def test_clopper_pearson_examples():
    assert clopper_pearson(0, 100, 0.05, "upper").bound == pytest.approx(1 - 0.05 ** (1 / 100), abs=1e-10)
    assert clopper_pearson(0, 100, 0.05, "upper").bound == pytest.approx(0.029513, abs=1e-6)
    assert clopper_pearson(7, 7, 0.05, "upper").bound == 1.0
    assert clopper_pearson(0, 7, 0.05, "lower").bound == 0.0
    N = 10**9
    for d in ("upper", "lower"):
        assert clopper_pearson(N // 2, N, 1e-3, d).bound == pytest.approx(0.5, abs=1e-4)
    for bad in ((-1, 5), (6, 5), (1.5, 5), (0, 0)):
        with pytest.raises(ValueError):
            clopper_pearson(*bad, 0.05, "upper")
    with pytest.raises(ValueError):
        clopper_pearson(1, 5, 0.0, "upper")
    with pytest.raises(ValueError):
        clopper_pearson(1, 5, 0.1, "sideways")


@given(st.integers(1, 10**6), st.floats(0, 1), st.floats(1e-9, 0.5))
def test_clopper_pearson_round_trip_against_binomial_tail(N, frac, a):
    s = min(N, int(frac * N))
    up = clopper_pearson(s, N, a, "upper").bound
    lo = clopper_pearson(s, N, a, "lower").bound
    assert 0.0 <= lo <= s / N <= up <= 1.0
    if s < N:
        assert binom.cdf(s, N, up) == pytest.approx(a, abs=1e-10, rel=1e-8)
    if s > 0:
        assert binom.sf(s - 1, N, lo) == pytest.approx(a, abs=1e-10, rel=1e-8)


@given(st.integers(1, 1000), st.integers(1, 50), st.floats(1e-9, 0.5))
def test_clopper_pearson_tightens_with_n(base, s, a):
    N = base + s
    narrow = [clopper_pearson(s * m, N * m, a, "upper").bound - clopper_pearson(s * m, N * m, a, "lower").bound
              for m in (1, 2, 4)]  # fmt: skip
    assert narrow[0] >= narrow[1] >= narrow[2]


@pytest.mark.parametrize("direction", ["upper", "lower"])
def test_clopper_pearson_coverage(direction):
    rng = np.random.default_rng(0)
    p, N, a, reps = 0.3, 50, 0.05, 1000
    fails = 0
    for s in rng.binomial(N, p, size=reps):
        b = clopper_pearson(int(s), N, a, direction).bound
        fails += (b < p) if direction == "upper" else (b > p)
    assert fails / reps <= a + 3 * math.sqrt(a * (1 - a) / reps)


def _true_round_probs(spec, p0):
    w = np.outer(spec.p_x(), spec.p_y)
    return np.stack([w * p0, w * (1 - p0)])


def _sample_counts(rng, spec, p0, N):
    q = _true_round_probs(spec, p0)
    return StatTable.from_counts(rng.multinomial(N, q.ravel()).reshape(q.shape))


@pytest.fixture(scope="module")
def noisy_case():
    spec = ProtocolSpec(2, 0.6, 2.0)
    stats = noisy_statistics(spec, ChannelModel(0.7, 1e-3, 0.05))
    P = build_problem(spec, GramConstraint.from_spec(spec), stats).to_conic()
    sol = solve(P)
    bound, ok = verify_certificate(P, sol.certificate)
    assert ok and not P.assumed_zero
    return spec, stats, P, sol.certificate, bound


def test_finite_pg_bound_coverage(noisy_case):
    spec, stats, P, cert, true_bound = noisy_case
    rng = np.random.default_rng(1)
    a1, reps = 0.1, 1000
    fails = sum(finite_size_pg_bound(P, cert, _sample_counts(rng, spec, stats.p0, 2000), spec, a1) < true_bound
                for _ in range(reps))  # fmt: skip
    assert fails / reps <= a1 + 3 * math.sqrt(a1 * (1 - a1) / reps)


def test_finite_pg_bound_large_n_limit(noisy_case):
    spec, stats, P, cert, true_bound = noisy_case
    N = 10**15
    counts = StatTable.from_counts(np.rint(_true_round_probs(spec, stats.p0) * N).astype(np.int64))
    assert finite_size_pg_bound(P, cert, counts, spec, 1e-9) == pytest.approx(true_bound, abs=1e-5)


def test_finite_pg_bound_zero_multipliers_give_k(noisy_case):
    spec, stats, P, cert, _ = noisy_case
    from sdiqkd.sdp import certified_constant

    zero = cert
    for key in cert.nu:
        zero = zero.with_nu(key, 0.0)
    K, ok, _ = certified_constant(P, zero)
    counts = _sample_counts(np.random.default_rng(2), spec, stats.p0, 1000)
    if ok:
        assert finite_size_pg_bound(P, zero, counts, spec, 1e-3) == K
    else:
        with pytest.raises(ValueError):
            finite_size_pg_bound(P, zero, counts, spec, 1e-3)


def test_finite_pg_bound_refusals(noisy_case):
    spec, stats, P, cert, _ = noisy_case
    counts = _sample_counts(np.random.default_rng(3), spec, stats.p0, 1000)
    bad = cert.with_nu((0, 1), cert.nu[(0, 1)] + 1.0)
    with pytest.raises(ValueError, match="verification"):
        finite_size_pg_bound(P, bad, counts, spec, 1e-3)
    with pytest.raises(ValueError):
        finite_size_pg_bound(P, cert, stats, spec, 1e-3)
    ideal = ideal_statistics(spec, 0.7)
    Q = build_problem(spec, GramConstraint.from_spec(spec), ideal).to_conic()
    with pytest.raises(ValueError, match="exactly-zero"):
        finite_size_pg_bound(Q, solve(Q).certificate, counts, spec, 1e-3)


def test_psucc_bound():
    spec = ProtocolSpec(2, 0.6, 1.0)
    zero = StatTable.from_counts(np.array([np.zeros((2, 2)), np.full((2, 2), 10)]))
    assert finite_size_psucc_bound(zero, spec, 1e-9) == 0.0
    _, counts = simulate(spec, ChannelModel(), 1_800_000, seed=4)
    exact = sift(spec, ideal_statistics(spec))[0]
    lower = finite_size_psucc_bound(counts, spec, 1e-9)
    assert lower <= exact and lower == pytest.approx(exact, rel=0.03)


def test_error_bound_covers_observed_rate():
    spec = ProtocolSpec(3, 0.7, 1.0)
    _, counts = simulate(spec, ChannelModel(0.6, 1e-3, 0.05), 100_000, seed=8)
    p_succ, qber = sift(spec, counts)
    assert finite_size_error_bound(counts, spec, 1e-9) >= qber * p_succ


def test_probability_mode_report_equals_asymptotic():
    spec = ProtocolSpec(2, 0.6, 2.0)
    stats = noisy_statistics(spec, ChannelModel(0.7, 1e-5, 0.02))
    gram = GramConstraint.from_spec(spec)
    asym = asymptotic_report(spec, gram, stats)
    P = build_problem(spec, gram, stats).to_conic()
    sol = solve(P)
    fin = finite_size_report(P, sol.certificate, stats, spec, 1e-9, 1e-9)
    assert not fin.finite
    assert fin.R == pytest.approx(asym.R, abs=1e-9)
    assert fin.p_g_conditional == pytest.approx(asym.p_g_conditional, abs=1e-9)


def test_finite_report_invariants():
    spec, model = ProtocolSpec(2, 0.6, 2.0), ChannelModel(0.8, 1e-5, 0.025)
    _, counts = simulate(spec, model, 500_000, seed=12)
    rep = certify_counts(spec, counts)
    asym = asymptotic_report(spec, GramConstraint.from_spec(spec), noisy_statistics(spec, model))
    assert rep.finite and rep.verified and rep.N == 500_000
    assert 0.5 <= rep.p_g_conditional <= 1.0
    assert 0.0 <= rep.h_min <= 1.0
    assert rep.R <= rep.h_min * rep.p_succ + 1e-15
    assert rep.R <= asym.R
    assert rep.alpha == pytest.approx(2e-9)
    text = rep.to_text()
    assert "[report]" in text and "[certificate]" in text and "mode = finite-size" in text


def test_finite_rate_grows_toward_asymptotic_with_n():
    spec, model = ProtocolSpec(2, 0.6, 2.0), ChannelModel(0.8, 1e-5, 0.025)
    asym = asymptotic_report(spec, GramConstraint.from_spec(spec), noisy_statistics(spec, model)).R
    medians = []
    for N in (10**4, 10**5, 10**6):
        rates = [certify_counts(spec, simulate(spec, model, N, seed=s)[1]).R for s in range(5)]
        medians.append(float(np.median(rates)))
    assert medians[0] <= medians[1] <= medians[2] <= asym


@given(st.integers(1, 10**6), st.floats(0, 1), st.floats(1e-9, 0.5))
def test_chernoff_fallback_is_looser_than_exact(N, frac, a):
    from sdiqkd.security import _chernoff_bound

    s = min(N, int(frac * N))
    assert _chernoff_bound(s, N, a, "upper") >= clopper_pearson(s, N, a, "upper").bound * (1 - 1e-9)
    assert _chernoff_bound(s, N, a, "lower") <= clopper_pearson(s, N, a, "lower").bound * (1 + 1e-9)


def test_bounds_stay_finite_beyond_inverse_beta_range():
    N = 10**15
    for d in ("upper", "lower"):
        b = clopper_pearson(N // 20, N, 5e-10, d).bound
        assert math.isfinite(b) and b == pytest.approx(0.05, abs=1e-6)
