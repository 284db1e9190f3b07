"""Free-space channel realizations and the heterodyne detector.

Transmittance statistics follow the beam-wander (log-negative Weibull) law of
a Gaussian beam hitting a circular aperture.  Laser phase noise is a Wiener
process and the frequency offset between the two free-running lasers is a
constant or per-sample trace.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.signal import lfilter
from scipy.special import i0e, i1e

from . import seeding
from .dsp import ComplexTrace, FrameLayout
from .errors import ParameterError
from .tx import TxFrame


def scintillation_sigma(cn2: float, z: float, w0: float) -> float:
    """Beam-wander variance sigma^2 = 1.919 Cn^2 z^3 (2 W0)^(-1/3), in m^2."""
    if cn2 < 0 or z < 0 or w0 <= 0:
        raise ParameterError("Cn^2 and z must be >= 0 and W0 > 0")
    return 1.919 * cn2 * z**3 * (2 * w0) ** (-1.0 / 3.0)


def turbulence_params(a: float, w: float) -> tuple[float, float, float]:
    """(T0^2, lambda, R) for aperture radius ``a`` and beam radius ``w``.

    The Bessel terms always appear as exp(-x) I_k(x), so the exponentially
    scaled forms keep large a/W finite.
    """
    if a <= 0 or w <= 0:
        raise ParameterError("aperture and beam radius must be positive")
    q = a**2 / w**2
    t0_sq = -np.expm1(-2 * q)
    x = 4 * q
    e0 = i0e(x)
    e1 = i1e(x)
    denom = 1 - e0
    log_term = np.log(2 * t0_sq / denom)
    lam = 8 * q * e1 / denom / log_term
    r = a * log_term ** (-1.0 / lam)
    return float(t0_sq), float(lam), float(r)


@dataclass(frozen=True)
class TurbulenceModel:
    """Aperture/beam geometry.  ``sigma2`` overrides the Cn^2-derived value."""

    a: float = 0.125
    w: float = 0.1038
    w0: float = 0.0625
    z: float = 10500.0
    cn2: float = 1e-15
    sigma2: Optional[float] = None
    extra_loss_db: float = 14.0

    def __post_init__(self):
        if min(self.a, self.w, self.w0, self.z) <= 0:
            raise ParameterError("turbulence lengths must be positive")
        if self.sigma2 is not None and self.sigma2 < 0:
            raise ParameterError("sigma2 must be non-negative")

    @property
    def beam_wander_variance(self) -> float:
        if self.sigma2 is not None:
            return float(self.sigma2)
        return scintillation_sigma(self.cn2, self.z, self.w0)

    @property
    def params(self) -> tuple[float, float, float]:
        return turbulence_params(self.a, self.w)

    @property
    def t0(self) -> float:
        return float(np.sqrt(self.params[0]))

    @property
    def loss_factor(self) -> float:
        return 10 ** (-self.extra_loss_db / 10)

    @property
    def max_transmittance(self) -> float:
        return self.params[0] * self.loss_factor

    def to_dict(self) -> dict:
        t0_sq, lam, r = self.params
        return {"a": self.a, "w": self.w, "w0": self.w0, "z": self.z, "cn2": self.cn2,
                "sigma2": self.beam_wander_variance, "extra_loss_db": self.extra_loss_db,
                "T0_sq": t0_sq, "lambda": lam, "R": r}


def weibull_pdf(t: np.ndarray, t0: float, lam: float, r: float, sigma2: float) -> np.ndarray:
    """Density of the amplitude transmission t on (0, t0]; zero elsewhere."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    ok = (t > 0) & (t <= t0)
    lt = np.log(t[ok])
    u = 2 * (np.log(t0) - lt)
    k = 2 / lam
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        # log domain: the 1/t factor and the u powers overflow separately deep in the tail
        logv = np.log(2 * r**2 / (sigma2 * lam)) - lt + (k - 1) * np.log(u) - r**2 / (2 * sigma2) * u**k
        val = np.exp(logv)
    out[ok] = np.nan_to_num(val, nan=0.0, posinf=0.0)
    return out


def transmittance_pdf(t, model: TurbulenceModel):
    """Log-negative Weibull density of the amplitude transmission T."""
    s2 = model.beam_wander_variance
    if s2 <= 0:
        raise ParameterError("density undefined for sigma^2 = 0")
    _, lam, r = model.params
    out = weibull_pdf(np.atleast_1d(t), model.t0, lam, r, s2)
    return out if np.ndim(t) else float(out[0])


def power_transmittance(r: np.ndarray, model: TurbulenceModel) -> np.ndarray:
    """Received power fraction for beam-centre offset ``r`` including static loss."""
    t0_sq, lam, big_r = model.params
    return t0_sq * np.exp(-((np.asarray(r) / big_r) ** lam)) * model.loss_factor


def _ou_axis(rng: np.random.Generator, n: int, rho: float, sigma: float) -> np.ndarray:
    w = rng.standard_normal(n)
    x0 = rng.standard_normal() * sigma
    b = [np.sqrt(1 - rho**2) * sigma]
    y, _ = lfilter(b, [1.0, -rho], w, zi=[rho * x0])
    return y


def sample_beam_wander_trace(model: TurbulenceModel, n_samples: int, correlation_time: float,
                             f_s: float, seed: int, frame_index: int = 0) -> np.ndarray:
    """Power transmittance of a beam whose centre performs a 2-D
    Ornstein-Uhlenbeck walk with per-axis stationary variance sigma^2."""
    if correlation_time <= 0:
        raise ParameterError("correlation_time must be positive")
    sigma = np.sqrt(model.beam_wander_variance)
    if sigma == 0:
        return np.full(n_samples, model.max_transmittance)
    rho = float(np.exp(-1.0 / (f_s * correlation_time)))
    rng = seeding.stream(seed, seeding.CHANNEL, frame_index, 0)
    x = _ou_axis(rng, n_samples, rho, sigma)
    y = _ou_axis(rng, n_samples, rho, sigma)
    return power_transmittance(np.hypot(x, y), model)


def wiener_phase(n: int, linewidth: float, f_s: float, rng: np.random.Generator) -> np.ndarray:
    """Phase random walk with increment variance 2*pi*linewidth/f_s, starting at 0."""
    if linewidth <= 0:
        return np.zeros(n)
    steps = rng.standard_normal(n) * np.sqrt(2 * np.pi * linewidth / f_s)
    steps[0] = 0.0
    return np.cumsum(steps)


@dataclass
class ChannelTrace:
    T: np.ndarray
    theta_s: np.ndarray
    theta_lo: np.ndarray
    delta_f: Union[float, np.ndarray] = 0.0

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=float)
        n = len(self.T)
        self.theta_s = np.broadcast_to(np.asarray(self.theta_s, dtype=float), (n,)).copy()
        self.theta_lo = np.broadcast_to(np.asarray(self.theta_lo, dtype=float), (n,)).copy()
        if np.ndim(self.delta_f) and np.size(self.delta_f) != n:
            raise ParameterError("frequency-offset trace length mismatch")
        if np.any(self.T < 0) or np.any(self.T > 1):
            raise ParameterError("transmittance must lie in [0, 1]")
        if not (np.all(np.isfinite(self.theta_s)) and np.all(np.isfinite(self.theta_lo))):
            raise ParameterError("non-finite phase trace")

    def __len__(self) -> int:
        return len(self.T)

    def alpha(self, sample_rate: float) -> np.ndarray:
        """Composite phase theta_s + 2*pi*delta_f*t - theta_lo per sample."""
        k = np.arange(len(self))
        if np.ndim(self.delta_f):
            carrier = 2 * np.pi * np.concatenate([[0.0], np.cumsum(self.delta_f[:-1])]) / sample_rate
        else:
            cycles = np.mod(self.delta_f / sample_rate * k, 1.0)
            carrier = 2 * np.pi * cycles
        return self.theta_s + carrier - self.theta_lo


def constant_channel(n: int, T: float = 1.0, delta_f: float = 0.0, theta_s: float = 0.0) -> ChannelTrace:
    return ChannelTrace(np.full(n, float(T)), np.full(n, float(theta_s)), np.zeros(n), delta_f)


def db_ramp(n: int, start_db: float, stop_db: float) -> np.ndarray:
    """Transmittance moving linearly in dB across ``n`` samples."""
    return 10 ** (np.linspace(start_db, stop_db, n) / 10)


def propagate(frame: Union[TxFrame, ComplexTrace], trace: ChannelTrace) -> ComplexTrace:
    x = frame.baseband if isinstance(frame, TxFrame) else frame
    if len(x) != len(trace):
        raise ParameterError(f"channel trace has {len(trace)} samples, frame {len(x)}")
    rot = np.sqrt(trace.T) * np.exp(1j * trace.alpha(x.sample_rate))
    return ComplexTrace(x.samples * rot, x.sample_rate, x.t0)


def inject_excess_noise(x: ComplexTrace, variance: float, seed: int, frame_index: int = 0) -> ComplexTrace:
    """Add white circular Gaussian noise of ``variance`` SNU per complex sample."""
    if variance < 0:
        raise ParameterError("excess-noise variance must be non-negative")
    if variance == 0:
        return x
    rng = seeding.stream(seed, seeding.EXCESS, frame_index)
    n = rng.standard_normal((2, len(x))) * np.sqrt(variance / 2)
    return ComplexTrace(x.samples + n[0] + 1j * n[1], x.sample_rate, x.t0)


@dataclass(frozen=True)
class DetectorModel:
    eta: float = 0.56
    nu_el: float = 0.1
    seed: int = 0
    noiseless: bool = False

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ParameterError("detection efficiency must lie in (0, 1]")
        if self.nu_el < 0:
            raise ParameterError("electrical noise must be non-negative")

    @property
    def vacuum_variance(self) -> float:
        return 0.0 if self.noiseless else 1.0 + self.nu_el


@dataclass
class DetectionRecord:
    samples: ComplexTrace
    layout: FrameLayout
    truth: Optional[ChannelTrace] = None
    detector: Optional[DetectorModel] = None

    def __len__(self) -> int:
        return len(self.samples)


def detect(optical: ComplexTrace, det: DetectorModel, layout: FrameLayout,
           truth: Optional[ChannelTrace] = None, frame_index: int = 0) -> DetectionRecord:
    """Heterodyne output sqrt(eta)*field + shot and electrical noise, in SNU."""
    out = np.sqrt(det.eta) * optical.samples
    if not det.noiseless:
        rng = seeding.stream(det.seed, seeding.DETECTOR, frame_index)
        n = rng.standard_normal((2, len(out))) * np.sqrt(det.vacuum_variance / 2)
        out = out + n[0] + 1j * n[1]
    return DetectionRecord(ComplexTrace(out, optical.sample_rate, optical.t0), layout, truth, det)
