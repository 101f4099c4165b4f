import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import stratified_average

from sdiqkd.channel import (
    ChannelModel,
    RoundLog,
    averaged_mean_photons,
    blinding_scenario,
    click_probability,
    detected_mean_photons,
    detected_mean_photons_reference,
    noisy_statistics,
    simulate,
)
from sdiqkd.protocol import ProtocolSpec, ideal_statistics, sift

angles = st.floats(-math.pi, math.pi)


def test_channel_validation():
    for bad in ({"eta": 1.5}, {"eta": -0.1}, {"p_dc": 1.0}, {"sigma": -0.1}):
        with pytest.raises(ValueError):
            ChannelModel(**bad)
    assert ChannelModel(0.8).scaled(0.5).eta == pytest.approx(0.4)


def test_detected_mean_photons_examples():
    spec, model = ProtocolSpec(2, 0.6, 1.0), ChannelModel()
    assert detected_mean_photons(spec, model, 0, 0) == pytest.approx(0.0, abs=1e-16)
    assert detected_mean_photons(spec, model, 0, 1) == pytest.approx(math.sin(0.6) ** 2, rel=1e-12)
    assert detected_mean_photons(spec, model, 0, 1) == pytest.approx(0.3188, abs=1e-4)


@given(st.integers(2, 4), st.floats(0, math.pi), angles, angles, st.floats(-0.3, 0.3), st.floats(-0.5, 0.5))
def test_vectorized_geometry_matches_jones_reference(n, theta, delta, phi, dtheta, dxy):
    spec, model = ProtocolSpec(n, theta, 1.7), ChannelModel(0.6, 0.0, 0.1, dtheta, dxy)
    for x in range(n):
        for y in range(n):
            a = detected_mean_photons(spec, model, x, y, (delta, phi))
            b = detected_mean_photons_reference(spec, model, x, y, (delta, phi))
            assert a == pytest.approx(b, abs=1e-12)


@pytest.mark.parametrize("n", [2, 3])
def test_noiseless_average_equals_unrotated_geometry(n):
    spec, model = ProtocolSpec(n, 0.7, 1.3), ChannelModel(0.9)
    for x in range(n):
        for y in range(n):
            phis = np.linspace(0, 2 * math.pi, 16, endpoint=False)
            avg = detected_mean_photons(spec, model, x, y, (np.zeros(16), phis)).mean()
            assert averaged_mean_photons(spec, model, x, y) == pytest.approx(avg, abs=1e-12)
    assert np.allclose(noisy_statistics(spec, model).p0, ideal_statistics(spec, 0.9).p0, atol=1e-15)


def test_large_noise_weights_terms_equally():
    spec = ProtocolSpec(2, 0.6, 1.0)
    r, t = math.sin(0.3) ** 2, math.cos(0.3) ** 2
    big = averaged_mean_photons(spec, ChannelModel(sigma=50.0), 0, 1)
    cos_d = math.cos(math.pi)
    expect = 0.5 * (2 * r * t * (1 - cos_d)) + 0.5 * (r * r + t * t + 2 * r * t * cos_d)
    assert big == pytest.approx(expect, rel=1e-12)


@pytest.mark.parametrize(("sigma", "dtheta", "dxy"), [(0.1, 0.0, 0.0), (0.04, 0.0, 0.0), (0.1, 0.05, -0.08)])
def test_closed_form_matches_monte_carlo(sigma, dtheta, dxy):
    spec, model = ProtocolSpec(3, 0.6, 1.0), ChannelModel(0.7, 0.0, sigma, dtheta, dxy)
    for x in range(3):
        for y in range(3):
            mc = stratified_average(lambda d, p: detected_mean_photons(spec, model, x, y, (d, p)), sigma, 700)
            assert mc == pytest.approx(averaged_mean_photons(spec, model, x, y), rel=1e-3)


def test_click_probability_examples():
    assert click_probability(0.0, ChannelModel()) == 0.0
    assert click_probability(1e4, ChannelModel()) == pytest.approx(1.0)
    p = click_probability(0.3188, ChannelModel(p_dc=3.24e-7))
    assert p == pytest.approx(1 - (1 - 3.24e-7) * math.exp(-0.3188), rel=1e-14)
    assert p == pytest.approx(0.27299, abs=2e-5)  # quoted value is rounded


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_statistics_nondecreasing_in_eta(e1, e2):
    lo, hi = sorted((e1, e2))
    spec = ProtocolSpec(3, 0.6, 2.0)
    p_lo = noisy_statistics(spec, ChannelModel(lo, 1e-6, 0.05, 0.01, 0.02)).p0
    p_hi = noisy_statistics(spec, ChannelModel(hi, 1e-6, 0.05, 0.01, 0.02)).p0
    assert np.all(p_hi >= p_lo)


def test_loss_commutes_with_rotation():
    spec = ProtocolSpec(2, 0.6, 1.0)
    fl = (0.3, 1.1)
    full = detected_mean_photons(spec, ChannelModel(1.0), 0, 1, fl)
    assert detected_mean_photons(spec, ChannelModel(0.37), 0, 1, fl) == pytest.approx(0.37 * full, rel=1e-14)


def test_simulate_single_round():
    log, stats = simulate(ProtocolSpec(2, 0.6, 1.0), ChannelModel(), 1, seed=5)
    assert len(log) == 1 and stats.N == 1
    rec = log[0]
    assert rec.round == 0 and rec.x in (rec.r0, rec.r1)


def test_simulate_reproducible_and_seed_sensitive():
    spec, model = ProtocolSpec(3, 0.7, 0.9), ChannelModel(0.6, 1e-4, 0.03)
    a, sa = simulate(spec, model, 5000, seed=2**64 - 1)
    b, sb = simulate(spec, model, 5000, seed=2**64 - 1)
    c, _ = simulate(spec, model, 5000, seed=1)
    assert a.to_csv() == b.to_csv() and np.array_equal(sa.counts, sb.counts)
    assert a.to_csv() != c.to_csv()
    with pytest.raises(ValueError):
        simulate(spec, model, 10, seed=-1)
    with pytest.raises(ValueError):
        simulate(spec, model, 10, seed=2**64)


def test_simulated_frequencies_within_five_sigma():
    spec = ProtocolSpec(2, 0.6, 1.0)
    _, stats = simulate(spec, ChannelModel(), 1_000_000, seed=3)
    p = ideal_statistics(spec).p0
    tot = stats.cell_totals()
    f = stats.conditional()
    sd = np.sqrt(np.maximum(p * (1 - p), 1e-12) / tot)
    assert np.all(np.abs(f - p) <= 5 * sd)
    p_succ, qber = sift(spec, ideal_statistics(spec))
    assert sift(spec, stats)[0] == pytest.approx(p_succ, rel=5 * math.sqrt((1 - p_succ) / (p_succ * 1e6)))
    assert qber == 0.0


def test_round_records_are_consistent():
    spec = ProtocolSpec(3, 0.6, 3.0)
    log, stats = simulate(spec, ChannelModel(0.8, 0.01, 0.05), 2000, seed=9)
    for rec in list(log)[:200]:
        assert rec.conclusive == (rec.b == 0 and rec.y in (rec.r0, rec.r1))
        assert rec.r0 < rec.r1
    assert np.array_equal(log.conclusive, [r.conclusive for r in log])
    assert stats.N == 2000


def test_round_log_csv_round_trip(tmp_path):
    log, _ = simulate(ProtocolSpec(3, 0.6, 1.0), ChannelModel(0.5), 300, seed=4)
    text = log.to_csv()
    assert text.splitlines()[0] == "round,r0,r1,k,y,b"
    back = RoundLog.from_csv(text)
    assert back.to_csv() == text
    log.write(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == text


def test_single_block_schedule_equals_simulate():
    spec, model = ProtocolSpec(2, 0.6, 1.0), ChannelModel(0.7, 1e-5, 0.02)
    (block,) = blinding_scenario(spec, model, [(20_000, 1.0)], seed=17)
    _, stats = simulate(spec, model, 20_000, seed=17)
    assert np.array_equal(block.counts, stats.counts)


def test_zero_efficiency_block_only_dark_counts():
    spec, p_dc = ProtocolSpec(2, 0.6, 1.0), 1e-3
    (block,) = blinding_scenario(spec, ChannelModel(0.9, p_dc), [(200_000, 0.0)], seed=2)
    p_succ, _ = sift(spec, block)
    # for n = 2 every setting lies in the only pair, so every click is conclusive
    assert p_succ == pytest.approx(p_dc, rel=5 / math.sqrt(200_000 * p_dc))


def test_blinding_schedule_validation():
    spec, model = ProtocolSpec(2, 0.6, 1.0), ChannelModel()
    with pytest.raises(ValueError):
        blinding_scenario(spec, model, [], seed=1)
    with pytest.raises(ValueError):
        blinding_scenario(spec, model, [(0, 1.0)], seed=1)
