"""Secret key rate of Gaussian-modulated coherent states with heterodyne
detection under collective attacks, plus the transmittance-binned rate."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, NonPhysicalError, ParameterError

EIG_TOL = 1e-9


@dataclass(frozen=True)
class SkrInput:
    """Operating point.  ``n=None`` means asymptotic (no finite-size term)."""

    v_a: float
    T: float
    epsilon: float
    eta: float = 0.56
    nu_el: float = 0.1
    beta: float = 0.96
    fer: float = 0.30
    f_m: float = 1e9
    n: Optional[float] = None
    eps_smooth: float = 1e-10
    eps_pe: float = 1e-10

    def __post_init__(self):
        checks = [
            (self.v_a > 0, "V_A must be positive"),
            (0 < self.T <= 1, "T must lie in (0, 1]"),
            (np.isfinite(self.epsilon) and self.epsilon >= 0, "excess noise must be finite and >= 0"),
            (0 < self.eta <= 1, "eta must lie in (0, 1]"),
            (self.nu_el >= 0, "electrical noise must be >= 0"),
            (0 < self.beta <= 1, "beta must lie in (0, 1]"),
            (0 <= self.fer <= 1, "FER must lie in [0, 1]"),
            (self.f_m > 0, "repetition rate must be positive"),
            (self.n is None or self.n >= 1, "block size must be >= 1"),
            (0 < self.eps_smooth < 1 and 0 < self.eps_pe < 1, "security parameters must lie in (0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ParameterError(msg)

    @property
    def V(self) -> float:
        return self.v_a + 1

    @property
    def chi_het(self) -> float:
        return (1 + (1 - self.eta) + 2 * self.nu_el) / self.eta

    @property
    def chi_line(self) -> float:
        return 1 / self.T - 1 + self.epsilon

    @property
    def chi_tot(self) -> float:
        return self.chi_line + self.chi_het / self.T

    def replace(self, **kw) -> "SkrInput":
        return SkrInput(**{**asdict(self), **kw})


@dataclass
class SkrReport:
    I_AB: float
    kappa_BE: float
    lambdas: tuple
    A: float
    B: float
    C: float
    D: float
    chi_line: float
    chi_het: float
    chi_tot: float
    delta_n: float
    bracket: float
    R: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        return d


def g_function(x):
    """G(x) = (x+1) log2(x+1) - x log2(x), continuous at x = 0."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise DomainError("G(x) is defined for x >= 0")
    # above 1 use log2(x+1) + x log2(1 + 1/x), which avoids cancelling two large terms
    big = np.maximum(x, 1.0)
    small = np.clip(x, np.finfo(float).tiny, 1.0)
    direct = (x + 1) * np.log2(x + 1) - np.where(x > 0, small * np.log2(small), 0.0)
    out = np.where(x >= 1, np.log2(x + 1) + big * np.log1p(1 / big) / np.log(2), direct)
    return float(out) if out.ndim == 0 else out


def mutual_information(inp: SkrInput) -> float:
    chi = inp.chi_tot
    return float(np.log2((inp.V + chi) / (1 + chi)))


def _pair(p: float, q: float, label: str, inp: SkrInput) -> tuple[float, float]:
    """Symplectic pair sqrt((p +- sqrt(p^2 - 4q))/2)."""
    disc = p * p - 4 * q
    if disc < -EIG_TOL * max(p * p, 1.0):
        raise NonPhysicalError(f"{label}: negative discriminant {disc:.3g}", asdict(inp))
    root = np.sqrt(max(disc, 0.0))
    hi, lo = (p + root) / 2, (p - root) / 2
    if lo < -EIG_TOL:
        raise NonPhysicalError(f"{label}: negative eigenvalue square {lo:.3g}", asdict(inp))
    return float(np.sqrt(hi)), float(np.sqrt(max(lo, 0.0)))


def _g_eig(lam: float, inp: SkrInput) -> float:
    x = (lam - 1) / 2
    if x < -EIG_TOL:
        raise NonPhysicalError(f"symplectic eigenvalue {lam:.12g} below 1", asdict(inp))
    return g_function(max(x, 0.0))


def holevo_bound(inp: SkrInput) -> tuple[float, tuple, float, float, float, float]:
    """(kappa_BE, (l1..l5), A, B, C, D) for the heterodyne, trusted-detector model."""
    V, T = inp.V, inp.T
    cl, ch, ct = inp.chi_line, inp.chi_het, inp.chi_tot
    A = V**2 * (1 - 2 * T) + 2 * T + T**2 * (V + cl) ** 2
    B = T**2 * (V * cl + 1) ** 2
    sb = np.sqrt(B)
    C = (A * ch**2 + B + 1 + 2 * ch * (V * sb + T * (V + cl)) + 2 * T * (V**2 - 1)) / (T * (V + ct)) ** 2
    D = ((V + sb * ch) / (T * (V + ct))) ** 2
    l1, l2 = _pair(A, B, "A/B", inp)
    l3, l4 = _pair(C, D, "C/D", inp)
    lams = (l1, l2, l3, l4, 1.0)
    g = [_g_eig(v, inp) for v in lams]
    kappa = g[0] + g[1] - g[2] - g[3] - g[4]
    return float(kappa), lams, float(A), float(B), float(C), float(D)


def finite_size_delta(n: Optional[float], eps_smooth: float = 1e-10, eps_pe: float = 1e-10) -> float:
    """7 sqrt(log2(1/eps_smooth)/n) + (2/n) log2(1/eps_pe); 0 when asymptotic."""
    if n is None or np.isinf(n):
        return 0.0
    if n < 1:
        raise ParameterError("block size must be >= 1")
    if not (0 < eps_smooth < 1 and 0 < eps_pe < 1):
        raise ParameterError("security parameters must lie in (0, 1)")
    return float(7 * np.sqrt(np.log2(1 / eps_smooth) / n) + 2 / n * np.log2(1 / eps_pe))


def secret_key_rate(inp: SkrInput) -> SkrReport:
    """R = F_m (1 - FER) [beta I_AB - kappa_BE - Delta(n)], floored at 0.

    The unfloored bracket is kept in the report.
    """
    i_ab = mutual_information(inp)
    kappa, lams, A, B, C, D = holevo_bound(inp)
    delta = finite_size_delta(inp.n, inp.eps_smooth, inp.eps_pe)
    bracket = inp.beta * i_ab - kappa - delta
    rate = inp.f_m * (1 - inp.fer) * max(bracket, 0.0)
    return SkrReport(i_ab, kappa, lams, A, B, C, D, inp.chi_line, inp.chi_het, inp.chi_tot,
                     delta, float(bracket), float(rate))


@dataclass
class TransmittanceBinning:
    """Per-bin centre transmittance (dB), probability and excess noise.

    ``epsilon`` entries that are NaN fall back to the template's value.
    """

    t_db: np.ndarray
    probability: np.ndarray
    epsilon: Optional[np.ndarray] = None
    rates: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.t_db = np.asarray(self.t_db, dtype=float)
        self.probability = np.asarray(self.probability, dtype=float)
        if self.t_db.shape != self.probability.shape:
            raise ParameterError("bin centres and probabilities differ in length")
        if np.any(self.probability < 0) or self.probability.sum() > 1 + 1e-9:
            raise ParameterError("bin probabilities must be >= 0 and sum to at most 1")
        if np.any(np.diff(self.t_db) <= 0):
            raise ParameterError("bins must be strictly ordered")
        if self.epsilon is not None:
            self.epsilon = np.asarray(self.epsilon, dtype=float)
            if self.epsilon.shape != self.t_db.shape:
                raise ParameterError("per-bin excess noise has the wrong length")


def bin_rates(binning: TransmittanceBinning, template: SkrInput) -> np.ndarray:
    rates = np.zeros(len(binning.t_db))
    for i, db in enumerate(binning.t_db):
        eps = template.epsilon
        if binning.epsilon is not None and np.isfinite(binning.epsilon[i]):
            eps = float(binning.epsilon[i])
        rates[i] = secret_key_rate(template.replace(T=float(10 ** (db / 10)), epsilon=max(eps, 0.0))).R
    return rates


def binned_final_rate(binning: TransmittanceBinning, template: SkrInput) -> float:
    """Sum over bins of P_T * R_T; bins with a negative bracket add nothing."""
    rates = bin_rates(binning, template)
    binning.rates = rates
    return float(np.sum(binning.probability * rates))


def rate_grid(template: SkrInput, t_db: Sequence[float], epsilons: Sequence[float]) -> np.ndarray:
    """R over a (loss, excess noise) grid; rows follow ``t_db``."""
    return np.array([[secret_key_rate(template.replace(T=10 ** (d / 10), epsilon=e)).R
                      for e in epsilons] for d in t_db])
