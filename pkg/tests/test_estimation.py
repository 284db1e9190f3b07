import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvqkd_sim import channel as ch
from cvqkd_sim import estimation as est
from cvqkd_sim.channel import DetectorModel
from cvqkd_sim.config import TurbulenceConfig
from cvqkd_sim.dsp import SymbolBlock
from cvqkd_sim.errors import ParameterError, UnreliableEstimateError
from cvqkd_sim.rx import TransmittanceSeries

DET = DetectorModel(0.56, 0.1, 0)


def synthetic(n, T, eps, seed=0, v_a=13.78, det=DET):
    """Symbol-level model y = sqrt(T eta)(s + e) + n with e ~ CN(eps) and vacuum+electrical n."""
    rng = np.random.default_rng(seed)
    c = lambda v: np.sqrt(v / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    T = np.broadcast_to(np.asarray(T, dtype=float), (n,)).copy()
    s = c(v_a)
    y = np.sqrt(T * det.eta) * (s + c(eps)) + c(det.vacuum_variance)
    return SymbolBlock(s), SymbolBlock(y), TransmittanceSeries(T, 1)


# ---- excess noise


@pytest.mark.parametrize("method", ["moments", "residual"])
def test_excess_noise_recovers_injected(method):
    s, y, t = synthetic(400_000, 1.0, 0.03, seed=1)
    b = est.estimate_excess_noise(s, y, t, DET, method=method)
    assert b.block_size == 400_000 and b.method == method
    # per-sample spread over T*eta*sqrt(n): the floor for the residual method,
    # floor plus T*eta*V_A for the moments method
    spread = DET.vacuum_variance + (0.56 * 13.78 if method == "moments" else 0.0)
    assert b.std_error < 1.2 * spread / (0.56 * np.sqrt(400_000))
    assert abs(b.epsilon - 0.03) < 4 * b.std_error


@settings(max_examples=20, deadline=None)
@given(st.floats(0.2, 5.0), st.integers(0, 1000))
def test_residual_invariant_under_joint_scaling(g, seed):
    # scaling y by g and every T by g^2 leaves the referred-to-input noise
    # unchanged once the floor is scaled with it
    s, y, t = synthetic(5000, 0.1, 0.02, seed, det=DetectorModel(0.56, 0.0, 0, True))
    a = est.estimate_excess_noise(s, y, t, DetectorModel(0.56, 0.0, 0, True), method="residual").epsilon
    ys = SymbolBlock(g * y.symbols)
    ts = TransmittanceSeries(g**2 * t.T, 1)
    b = est.estimate_excess_noise(s, ys, ts, DetectorModel(0.56, 0.0, 0, True), method="residual").epsilon
    assert b == pytest.approx(a, rel=1e-9, abs=1e-12)


def test_excess_noise_rejects_tiny_transmittance():
    s, y, _ = synthetic(100, 0.1, 0.0)
    with pytest.raises(UnreliableEstimateError):
        est.estimate_excess_noise(s, y, TransmittanceSeries(np.zeros(100), 1), DET)


def test_excess_noise_argument_checks():
    s, y, t = synthetic(100, 0.1, 0.0)
    with pytest.raises(ParameterError):
        est.estimate_excess_noise(s, y, t, DET, method="guess")
    with pytest.raises(ParameterError):
        est.estimate_excess_noise(SymbolBlock(s.symbols[:50]), y, t, DET)
    with pytest.raises(ParameterError):
        est.estimate_excess_noise(s, y, TransmittanceSeries(t.T[:99], 1), DET)


def test_per_symbol_transmittance_beats_block_average_on_fading():
    n = 400_000
    rng = np.random.default_rng(4)
    T = np.minimum(0.5 * np.exp(0.5 * rng.standard_normal(n)), 1.0)
    s, y, t = synthetic(n, T, 0.01, seed=5)
    per = est.estimate_excess_noise(s, y, t, DET, method="residual")
    avg = est.estimate_excess_noise(s, y, t, DET, method="residual", average_t=True).epsilon
    assert abs(per.epsilon - 0.01) < 4 * per.std_error
    # averaging T adds about V_A Var(sqrt T)/mean(T), roughly 0.8 here
    assert avg > per.epsilon + 0.5


def test_binned_noise_below_block_average():
    n = 400_000
    rng = np.random.default_rng(6)
    T = 10 ** ((-16 - 6 * rng.random(n)) / 10)
    s, y, t = synthetic(n, T, 0.02, seed=7)
    binned = est.excess_noise_by_bin(s, y, t, DET, est.bin_edges_db(-22, -16, 1.0))
    assert np.all(binned.counts > 0)
    avg = est.estimate_excess_noise(s, y, t, DET, method="residual", average_t=True).epsilon
    assert binned.weighted_epsilon < avg


def test_bin_edges():
    np.testing.assert_allclose(est.bin_edges_db(-26, -14, 1.0), np.arange(-26, -13))
    for args in [(-14, -26, 1.0), (-26, -14, 0.0)]:
        with pytest.raises(ParameterError):
            est.bin_edges_db(*args)


# ---- modulation imbalance


def test_min_variance_zero_and_value():
    assert est.min_variance(1.0, 0.0, 13.78) == 0.0
    # (V_A/2)[d^2 sin^2 + (d cos - 1)^2] = (V_A/2)(1 + d^2 - 2 d cos)
    d, th = 0.9937, math.radians(2.0)
    assert est.min_variance(d, th, 13.78) == pytest.approx(13.78 / 2 * (1 + d * d - 2 * d * math.cos(th)), rel=1e-12)
    with pytest.raises(ParameterError):
        est.min_variance(0.0, 0.1, 13.78)


@given(st.floats(0.5, 1.5), st.floats(0.0, 0.5))
def test_min_variance_even_and_monotone_in_angle(d, th):
    v = est.min_variance(d, th, 13.78)
    assert v == pytest.approx(est.min_variance(d, -th, 13.78), rel=1e-12, abs=1e-15)
    assert est.min_variance(d, th + 0.01, 13.78) >= v


# ---- fading noise


def test_sqrt_t_variance_matches_definition():
    t = np.array([0.01, 0.04, 0.09])
    assert est.sqrt_t_variance(t) == pytest.approx(np.mean(t) - np.mean(np.sqrt(t)) ** 2, rel=1e-12)
    assert est.sqrt_t_variance(np.array([])) == 0.0


def test_fading_noise_argument_checks():
    t = np.ones(10)
    for kw in [dict(segment_len=0), dict(segment_len=11), dict(segment_len=5, trials=0)]:
        with pytest.raises(ParameterError):
            est.fading_noise(t, 13.78, **kw)


def _fading_samples(tau, frames=40):
    m = TurbulenceConfig().model()
    return np.array([est.fading_noise(ch.sample_beam_wander_trace(m, 1_000_000, tau, 1e9, 5, f), 13.78,
                                      1_000_000)[0] for f in range(frames)])


@pytest.mark.slow
def test_fading_noise_small_for_slow_turbulence():
    # 1 ms segments at 1 GHz; the bound holds once the wander is much slower
    # than a segment
    v = _fading_samples(30e-3, frames=60)
    assert np.mean(v < 0.003) >= 0.95
    fast = _fading_samples(1e-3, frames=20)
    assert np.median(fast) > np.median(v)


# ---- transmittance statistics


def test_transmittance_stats_identical_samples():
    s = est.transmittance_stats(np.full(100, 0.02))
    assert len(s.probabilities) == 1 and s.probabilities[0] == 1.0
    assert s.edges_db[0] <= 10 * math.log10(0.02) < s.edges_db[1]


def test_transmittance_stats_fixed_range():
    rng = np.random.default_rng(0)
    t = 10 ** (rng.uniform(-27, -13, 10_000) / 10)
    s = est.transmittance_stats(t, 1.0, (-26.0, -14.0))
    assert len(s.probabilities) == 12
    assert s.probabilities.sum() == pytest.approx(1.0, abs=1e-12)
    assert s.coverage == pytest.approx(12 / 14, abs=0.02)
    np.testing.assert_allclose(s.centers_db, np.arange(-25.5, -13.5))


def test_transmittance_stats_errors():
    with pytest.raises(ParameterError):
        est.transmittance_stats(np.array([]))
    with pytest.raises(ParameterError):
        est.transmittance_stats(np.ones(3), 0.0)


def _weibull_amplitudes(t0, lam, r, sigma2, n, seed):
    # u = 2 ln(T0/T) is Weibull with shape 2/lambda and rate R^2/(2 sigma^2)
    rng = np.random.default_rng(seed)
    k = 2 / lam
    scale = (r**2 / (2 * sigma2)) ** (-1 / k)
    u = scale * rng.weibull(k, n)
    return t0 * np.exp(-u / 2)


def test_weibull_fit_recovers_parameters():
    t0, lam, r, sigma2 = 0.945, 6.6, 0.11, 4.4e-3
    fit = est.fit_weibull(_weibull_amplitudes(t0, lam, r, sigma2, 1_000_000, 8), t0, r)
    assert fit.lam == pytest.approx(lam, rel=0.05)
    assert fit.sigma2 == pytest.approx(sigma2, rel=0.05)
    assert (fit.t0, fit.r) == (t0, r)


def test_weibull_refit_is_idempotent():
    t0, r = 0.9, 0.1
    a = _weibull_amplitudes(t0, 5.0, r, 2e-3, 200_000, 9)
    f1 = est.fit_weibull(a, t0, r)
    f2 = est.fit_weibull(a, t0, r)
    assert (f1.lam, f1.sigma2, f1.log_likelihood) == (f2.lam, f2.sigma2, f2.log_likelihood)
    with pytest.raises(ParameterError):
        est.fit_weibull(np.full(50, t0), t0, r)


def test_stats_refit_on_sampled_trace():
    m = ch.TurbulenceModel(extra_loss_db=0.0)
    t = ch.sample_beam_wander_trace(m, 400_000, 1e-13, 1e9, 12)
    s = est.transmittance_stats(t, model=m)
    assert s.fitted_weibull is not None
    assert s.fitted_weibull.lam == pytest.approx(m.params[1], rel=0.05)
