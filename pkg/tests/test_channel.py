import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scusfl import channel as ch

MC = 10 ** 6


def unit_power(rng, shape):
    x = rng.standard_normal(shape)
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True))


def real(model="awgn", snr=10.0, h=1.0, seed=0):
    return ch.ChannelRealization(model, snr, h, seed)


def test_noiseless_identity(rng):
    x = unit_power(rng, (4, 12))
    assert np.array_equal(ch.transmit(x, real(snr=math.inf)), x)


def test_noiseless_gain(rng):
    x = unit_power(rng, (3, 8))
    y = ch.transmit(x, real("rayleigh", math.inf, 2.0))
    assert np.array_equal(y, 2 * x)
    np.testing.assert_allclose(ch.equalize(y, real("rayleigh", math.inf, 2.0)), x, rtol=0, atol=1e-12)


@pytest.mark.parametrize("model,h", [("awgn", 1.0), ("rayleigh", 0.37), ("rayleigh", 1.8)])
def test_noiseless_round_trip_exact(model, h, rng):
    x = unit_power(rng, (5, 24))
    r = real(model, math.inf, h)
    np.testing.assert_allclose(ch.equalize(ch.transmit(x, r), r), x, rtol=1e-15, atol=0)


def test_awgn_noise_variance_monte_carlo(rng):
    x = unit_power(rng, (1, MC))
    y = ch.transmit(x, real(snr=10.0), np.random.default_rng(11))
    assert 0.099 <= float(np.var(y - x)) <= 0.101


def test_measured_snr_matches_convention(rng):
    h = 0.6
    x = unit_power(rng, (1, MC))
    r = real("rayleigh", 7.0, h)
    y = ch.transmit(x, r, np.random.default_rng(5))
    measured = np.mean((h * x) ** 2) / np.var(y - h * x)
    assert measured == pytest.approx(10 ** (7.0 / 10) * h * h, rel=0.02)


def test_rayleigh_residual_noise_after_equalisation(rng):
    h = 0.5
    x = unit_power(rng, (1, MC))
    r = real("rayleigh", 10.0, h)
    resid = ch.equalize(ch.transmit(x, r, np.random.default_rng(3)), r) - x
    assert float(np.var(resid)) == pytest.approx(0.1 / h ** 2, rel=0.01)


def test_unnormalised_input_rejected():
    with pytest.raises(ch.ChannelError):
        ch.transmit(np.full((1, 4), 2.0), real())


def test_transmit_is_seeded(rng):
    x = unit_power(rng, (2, 16))
    r = real(snr=5.0, seed=42)
    assert np.array_equal(ch.transmit(x, r), ch.transmit(x, r))


def test_rayleigh_gain_second_moment():
    rng = np.random.default_rng(0)
    hs = np.array([ch.sample_realization("rayleigh", 10.0, rng, 0).h for _ in range(20000)])
    assert float(np.mean(hs ** 2)) == pytest.approx(1.0, abs=0.03)
    assert ch.sample_realization("awgn", 10.0, rng, 0).h == 1.0


def test_effective_snr():
    assert real("rayleigh", 10.0, 1.0).effective_snr_db == pytest.approx(10.0)
    assert real("rayleigh", 10.0, math.sqrt(0.1)).effective_snr_db == pytest.approx(0.0)


@pytest.mark.parametrize("bw,snr_lin,rate", [(1e6, 3.0, 2e6), (5e6, 15.0, 20e6)])
def test_shannon_rate_examples(bw, snr_lin, rate):
    assert ch.shannon_rate(bw, 10 * math.log10(snr_lin)) == pytest.approx(rate, rel=1e-12)


def test_shannon_rate_limits():
    assert ch.shannon_rate(1e6, -math.inf) == 0.0
    assert ch.shannon_rate(1e6, math.inf) == math.inf
    with pytest.raises(ch.ChannelError):
        ch.shannon_rate(-1.0, 10.0)


@given(st.floats(-30, 40), st.floats(0.01, 10.0), st.floats(1e3, 1e8))
def test_shannon_rate_monotone_and_linear(snr, step, bw):
    assert ch.shannon_rate(bw, snr + step) > ch.shannon_rate(bw, snr)
    assert ch.shannon_rate(2 * bw, snr) == pytest.approx(2 * ch.shannon_rate(bw, snr), rel=1e-12)


def test_schedule_parsing():
    assert ch.parse_schedule(10) == [(0, 10.0)]
    sched = ch.parse_schedule([[5, 0.0], [0, 20.0]])
    assert sched == [(0, 20.0), (5, 0.0)]
    assert ch.scheduled_snr(sched, 4) == 20.0 and ch.scheduled_snr(sched, 5) == 0.0
    with pytest.raises(ch.ChannelError):
        ch.parse_schedule([[1, 10.0]])


def test_trace_is_pure_function_of_seed():
    a = ch.generate_trace("rayleigh", 10.0, 3, 4, seed=8)
    b = ch.generate_trace("rayleigh", 10.0, 3, 4, seed=8)
    c = ch.generate_trace("rayleigh", 10.0, 3, 4, seed=9)
    assert a.cells == b.cells
    assert a.cells != c.cells
    assert a.get(2, 3, "down") == b.get(2, 3, "down")
    with pytest.raises(KeyError):
        a.get(3, 0)


def test_trace_cells_independent_of_client_count():
    # A client's realizations must not depend on how many other clients exist.
    a = ch.generate_trace("rayleigh", 10.0, 2, 3, seed=1)
    b = ch.generate_trace("rayleigh", 10.0, 5, 3, seed=1)
    assert all(a.cells[k] == b.cells[k] for k in a.cells)
