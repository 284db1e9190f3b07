"""Excess noise, modulation-imbalance noise, fading noise and transmittance
statistics computed from demodulated symbols and transmittance traces."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import stats

from . import seeding
from .channel import DetectorModel, TurbulenceModel
from .dsp import SymbolBlock
from .errors import ParameterError, UnreliableEstimateError
from .rx import TransmittanceSeries

METHODS = ("moments", "residual")


@dataclass
class NoiseBudget:
    """Excess-noise breakdown referred to the channel input, in SNU.

    ``epsilon`` may come out slightly negative on short blocks; it is
    reported unclamped so repeated estimates stay unbiased.
    """

    epsilon: float
    min_var: float
    epsilon_f: float
    block_size: int
    method: str = "moments"
    std_error: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def _aligned(tx_syms: SymbolBlock, rx_syms: SymbolBlock, t_series: Optional[TransmittanceSeries]):
    """Slice the transmitted block and T trace to the symbols Bob kept."""
    lo = rx_syms.start - tx_syms.start
    if lo < 0 or lo + len(rx_syms) > len(tx_syms):
        raise ParameterError("received block is not covered by the transmitted block")
    s = tx_syms.symbols[lo:lo + len(rx_syms)]
    t = None
    if t_series is not None:
        if t_series.start != rx_syms.start or len(t_series) != len(rx_syms):
            raise ParameterError("transmittance series and received block cover different symbols")
        t = np.asarray(t_series.T, dtype=float)
    return s, rx_syms.symbols, t


def noise_floor(det: DetectorModel, rx_syms: SymbolBlock) -> float:
    """Vacuum plus electrical noise per symbol after the receive filter."""
    return det.vacuum_variance * rx_syms.noise_gain


def _epsilon(s, y, t, eta, floor, v_a, method):
    teta = float(np.mean(t)) * eta
    if not teta > 1e-12:
        raise UnreliableEstimateError(f"mean(T)*eta = {teta:.3g} is too small to refer noise to the input")
    if method == "moments":
        va = float(np.mean(np.abs(s) ** 2)) if v_a is None else v_a
        z = np.abs(y - np.mean(y)) ** 2 - teta * va - floor
    else:
        z = np.abs(y - np.sqrt(t * eta) * s) ** 2 - floor
    return float(np.mean(z) / teta), float(np.std(z) / np.sqrt(len(z)) / teta)


def estimate_excess_noise(tx_syms: SymbolBlock, rx_syms: SymbolBlock, t_series: TransmittanceSeries,
                          det: DetectorModel, v_a: Optional[float] = None, method: str = "moments",
                          average_t: bool = False) -> NoiseBudget:
    """Excess noise referred to Alice from Bob's symbols.

    ``moments`` inverts the second-moment equation
    Var(y) = T*eta*V_A + eta*T*eps + floor with V_A taken from the realized
    transmit symbols unless ``v_a`` is given.  ``residual`` uses the revealed
    symbols and subtracts sqrt(T_i*eta)*s_i before taking the variance, which
    makes it sensitive to within-block fading.  With ``average_t`` every
    symbol is assigned the block-mean transmittance.
    """
    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}")
    s, y, t = _aligned(tx_syms, rx_syms, t_series)
    if average_t:
        t = np.full_like(t, np.mean(t))
    eps, se = _epsilon(s, y, t, det.eta, noise_floor(det, rx_syms), v_a, method)
    return NoiseBudget(eps, 0.0, 0.0, len(y), method, se)


@dataclass
class BinnedNoise:
    edges_db: np.ndarray
    counts: np.ndarray
    t_mean: np.ndarray
    epsilon: np.ndarray

    @property
    def weighted_epsilon(self) -> float:
        ok = self.counts > 0
        return float(np.sum(self.counts[ok] * self.epsilon[ok]) / np.sum(self.counts[ok]))


def bin_edges_db(lo_db: float, hi_db: float, width_db: float) -> np.ndarray:
    if width_db <= 0 or hi_db <= lo_db:
        raise ParameterError("need hi > lo and a positive bin width")
    n = int(round((hi_db - lo_db) / width_db))
    return lo_db + width_db * np.arange(n + 1)


def excess_noise_by_bin(tx_syms: SymbolBlock, rx_syms: SymbolBlock, t_series: TransmittanceSeries,
                        det: DetectorModel, edges_db: np.ndarray, method: str = "residual",
                        min_count: int = 1000) -> BinnedNoise:
    """Excess noise per transmittance bin, each bin using its own mean T."""
    s, y, t = _aligned(tx_syms, rx_syms, t_series)
    floor = noise_floor(det, rx_syms)
    db = 10 * np.log10(np.maximum(t, 1e-300))
    idx = np.digitize(db, edges_db) - 1
    nb = len(edges_db) - 1
    counts = np.zeros(nb, dtype=int)
    t_mean = np.full(nb, np.nan)
    eps = np.full(nb, np.nan)
    for b in range(nb):
        sel = idx == b
        counts[b] = int(np.count_nonzero(sel))
        if counts[b] < min_count:
            continue
        tb = np.full(counts[b], np.mean(t[sel]))
        t_mean[b] = tb[0]
        eps[b] = _epsilon(s[sel], y[sel], tb, det.eta, floor, None, method)[0]
    counts[np.isnan(eps)] = 0
    return BinnedNoise(np.asarray(edges_db, dtype=float), counts, t_mean, eps)


def min_variance(d, theta, v_a: float):
    """Modulation-imbalance noise at the sender, (V_A/2)[d^2 sin^2 + (d cos - 1)^2]."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ParameterError("imbalance ratio d must be positive")
    th = np.asarray(theta, dtype=float)
    out = v_a / 2 * (d**2 * np.sin(th) ** 2 + (d * np.cos(th) - 1) ** 2)
    return float(out) if out.ndim == 0 else out


def sqrt_t_variance(t: np.ndarray) -> float:
    """Var(sqrt(T)) = mean(T) - mean(sqrt(T))^2, evaluated in the form that
    cannot go negative under rounding."""
    r = np.sqrt(np.asarray(t, dtype=float))
    # shifting by one sample keeps a constant trace at exactly zero
    return float(np.var(r - r[0])) if r.size else 0.0


def fading_noise(t_trace: np.ndarray, v_a: float, segment_len: int, trials: int = 1,
                 seed: int = 0) -> np.ndarray:
    """Fading noise Var(sqrt(T))*(V_A - 1) on ``trials`` random contiguous
    segments of length ``segment_len``."""
    t = np.asarray(t_trace, dtype=float)
    if segment_len < 1 or segment_len > len(t):
        raise ParameterError(f"segment length {segment_len} outside 1..{len(t)}")
    if trials < 1:
        raise ParameterError("need at least one trial")
    rng = seeding.stream(seed, seeding.FADING)
    starts = rng.integers(0, len(t) - segment_len + 1, size=trials)
    return np.array([sqrt_t_variance(t[k:k + segment_len]) * (v_a - 1) for k in starts])


@dataclass
class WeibullFit:
    t0: float
    lam: float
    r: float
    sigma2: float
    log_likelihood: float


@dataclass
class TransmittanceStats:
    edges_db: np.ndarray
    probabilities: np.ndarray
    coverage: float = 1.0
    fitted_weibull: Optional[WeibullFit] = None

    @property
    def centers_db(self) -> np.ndarray:
        return 0.5 * (self.edges_db[1:] + self.edges_db[:-1])


def fit_weibull(t_amp: np.ndarray, t0: float, r: float) -> WeibullFit:
    """Maximum-likelihood (lambda, sigma^2) of the log-negative Weibull law for
    amplitude samples, with T0 and R held at their geometric values.

    With u = 2 ln(T0/T) the law is an ordinary Weibull in u with shape
    2/lambda and rate R^2/(2 sigma^2); only that ratio is identifiable, so R
    has to be supplied.
    """
    t = np.asarray(t_amp, dtype=float)
    t = t[(t > 0) & (t < t0)]
    if len(t) < 10:
        raise ParameterError("too few samples inside (0, T0) to fit")
    u = 2 * (np.log(t0) - np.log(t))
    k, _, scale = stats.weibull_min.fit(u, floc=0)
    c = scale ** (-k)
    sigma2 = r**2 / (2 * c)
    ll = float(np.sum(stats.weibull_min.logpdf(u, k, 0, scale) + np.log(2) - np.log(t)))
    return WeibullFit(float(t0), float(2 / k), float(r), float(sigma2), ll)


def transmittance_stats(t_samples: np.ndarray, bin_width_db: float = 1.0,
                        range_db: Optional[tuple[float, float]] = None,
                        model: Optional[TurbulenceModel] = None) -> TransmittanceStats:
    """Histogram of power transmittance in dB; probabilities are normalised over
    the samples that fall in the binned range and ``coverage`` records that
    fraction.  With ``model`` the log-negative Weibull law is refitted."""
    t = np.asarray(t_samples, dtype=float).ravel()
    if t.size == 0:
        raise ParameterError("no transmittance samples")
    if bin_width_db <= 0:
        raise ParameterError("bin width must be positive")
    db = 10 * np.log10(np.maximum(t, 1e-300))
    if range_db is None:
        lo = np.floor(db.min() / bin_width_db) * bin_width_db
        nb = max(int(np.ceil((db.max() - lo) / bin_width_db - 1e-12)), 1)
        if lo + nb * bin_width_db <= db.max():
            nb += 1
        edges = lo + bin_width_db * np.arange(nb + 1)
    else:
        edges = bin_edges_db(range_db[0], range_db[1], bin_width_db)
    counts, _ = np.histogram(db, edges)
    inside = counts.sum()
    probs = counts / inside if inside else np.zeros(len(counts))
    fit = None
    if model is not None:
        t0_sq, _, r = model.params
        try:
            fit = fit_weibull(np.sqrt(t / model.loss_factor), np.sqrt(t0_sq), r)
        except (ParameterError, RuntimeError, ValueError):
            fit = None
    return TransmittanceStats(edges, probs, float(inside / t.size), fit)
