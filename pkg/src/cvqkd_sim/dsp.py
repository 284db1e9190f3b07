"""Signal-processing primitives shared by the transmitter and receiver.

Traces are complex baseband sample arrays with a sample rate.  Frames are
treated as one period of a continuously replayed waveform, so most helpers
here come in a linear flavour (plain convolution, as used for bursts) and a
cyclic flavour (circular convolution over the frame period).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Literal, Optional

import numpy as np
import scipy.fft as sfft
from scipy.signal import fftconvolve

from .errors import InsufficientDataError, ParameterError


@dataclass(frozen=True)
class FrameLayout:
    """Modulation-format constants of one frame.

    ``pilot_amp_ratio`` is the pilot amplitude relative to the RMS amplitude of
    the quantum symbols, so each pilot symbol is
    ``pilot_amp_ratio * sqrt(v_a / 2) * (1 + 1j)``.
    """

    symbol_rate: float = 1e9
    sample_rate: float = 5e9
    roll_off: float = 0.3
    span: int = 10
    n_symbols: int = 1_000_000
    f_pilot: float = -1.25e9
    pilot_amp_ratio: float = 16.0
    v_a: float = 13.78

    def __post_init__(self):
        ratio = self.sample_rate / self.symbol_rate
        if self.symbol_rate <= 0 or self.sample_rate <= 0:
            raise ParameterError("rates must be positive")
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ParameterError(f"sample_rate/symbol_rate must be an integer, got {ratio}")
        if not 0 < self.roll_off <= 1:
            raise ParameterError(f"roll_off must lie in (0, 1], got {self.roll_off}")
        if self.span < 2 or self.span % 2:
            raise ParameterError(f"span must be an even integer >= 2, got {self.span}")
        if abs(self.f_pilot) >= self.sample_rate / 2:
            raise ParameterError("pilot frequency beyond Nyquist")
        if self.span * self.sps + 1 > self.n_symbols * self.sps:
            raise ParameterError("frame shorter than one filter span")
        if self.pilot_amp_ratio < 0 or self.v_a <= 0:
            raise ParameterError("pilot_amp_ratio must be >= 0 and v_a > 0")

    @property
    def sps(self) -> int:
        return int(round(self.sample_rate / self.symbol_rate))

    @property
    def n_samples(self) -> int:
        return self.n_symbols * self.sps

    @property
    def pilot_symbol(self) -> complex:
        return complex(self.pilot_amp_ratio * np.sqrt(self.v_a / 2) * (1 + 1j))

    @property
    def quantum_half_band(self) -> float:
        return (1 + self.roll_off) * self.symbol_rate / 2

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class RrcTaps:
    coefficients: np.ndarray
    sps: int
    span: int

    def __len__(self) -> int:
        return len(self.coefficients)


@dataclass
class ComplexTrace:
    samples: np.ndarray
    sample_rate: float
    t0: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=complex)
        if self.sample_rate <= 0:
            raise ParameterError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ParameterError("trace contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    def time(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.samples)) / self.sample_rate


@dataclass
class SymbolBlock:
    """Symbols of one role.  ``start`` is the frame index of the first symbol
    and ``noise_gain`` the factor by which receiver processing scales white
    detector noise (1 for raw symbols)."""

    symbols: np.ndarray
    role: Literal["quantum", "pilot"] = "quantum"
    start: int = 0
    noise_gain: float = 1.0

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=complex)
        if self.role not in ("quantum", "pilot"):
            raise ParameterError(f"unknown role {self.role!r}")
        if not np.all(np.isfinite(self.symbols)):
            raise ParameterError("symbol block contains non-finite values")

    def __len__(self) -> int:
        return len(self.symbols)


def _rrc_value(t: float, a: float) -> float:
    if abs(t) < 1e-12:
        return 1 - a + 4 * a / np.pi
    if abs(abs(4 * a * t) - 1) < 1e-9:
        return a / np.sqrt(2) * (
            (1 + 2 / np.pi) * np.sin(np.pi / (4 * a)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * a))
        )
    num = np.sin(np.pi * t * (1 - a)) + 4 * a * t * np.cos(np.pi * t * (1 + a))
    return num / (np.pi * t * (1 - (4 * a * t) ** 2))


def design_rrc(alpha: float, sps: int, span: int) -> RrcTaps:
    """Root-raised-cosine taps of length ``sps*span + 1`` with unit energy."""
    if not 0 < alpha <= 1:
        raise ParameterError(f"roll-off must lie in (0, 1], got {alpha}")
    if int(sps) != sps or sps < 1:
        raise ParameterError(f"sps must be a positive integer, got {sps}")
    if int(span) != span or span < 2 or span % 2:
        raise ParameterError(f"span must be an even integer >= 2, got {span}")
    n = np.arange(sps * span + 1) - sps * span / 2
    h = np.array([_rrc_value(k / sps, alpha) for k in n])
    h /= np.sqrt(np.sum(h**2))
    # enforce exact mirror symmetry against rounding in the general branch
    h = 0.5 * (h + h[::-1])
    return RrcTaps(h, int(sps), int(span))


def upsample(block: SymbolBlock, sps: int, symbol_rate: float = 1.0) -> ComplexTrace:
    """Zero-insertion: symbol k lands on sample k*sps."""
    if int(sps) != sps or sps < 1:
        raise ParameterError(f"sps must be a positive integer, got {sps}")
    out = np.zeros(len(block.symbols) * sps, dtype=complex)
    out[::sps] = block.symbols
    return ComplexTrace(out, symbol_rate * sps)


def pulse_shape(trace: ComplexTrace, taps: RrcTaps) -> ComplexTrace:
    """Full linear convolution, output length ``len(taps) + len(trace) - 1``."""
    if len(trace) == 0:
        raise ParameterError("cannot shape an empty trace")
    y = fftconvolve(trace.samples, taps.coefficients)
    delay = (len(taps) - 1) / 2
    return ComplexTrace(y, trace.sample_rate, trace.t0 - delay / trace.sample_rate)


def fold_periodic(samples: np.ndarray, period: int, delay: int) -> np.ndarray:
    """Wrap a linear-convolution output onto one period.

    The result is what a receiver sees while the waveform repeats forever,
    with ``delay`` samples of filter latency removed.
    """
    n_rows = -(-len(samples) // period)
    padded = np.zeros(n_rows * period, dtype=complex)
    padded[: len(samples)] = samples
    return np.roll(padded.reshape(n_rows, period).sum(axis=0), -delay)


def centered_kernel_spectrum(taps: RrcTaps, n: int) -> np.ndarray:
    """DFT of the taps placed symmetrically around sample 0 of an n-periodic grid."""
    h = taps.coefficients
    if len(h) > n:
        raise InsufficientDataError("period shorter than the filter")
    k = np.zeros(n)
    idx = (np.arange(len(h)) - len(h) // 2) % n
    np.add.at(k, idx, h)
    return sfft.fft(k).real


def periodic_shape(symbols: np.ndarray, taps: RrcTaps) -> np.ndarray:
    """Circularly pulse-shaped frame; symbol k peaks at sample k*sps."""
    s = np.asarray(symbols, dtype=complex)
    n_samples = len(s) * taps.sps
    spec = np.tile(sfft.fft(s), taps.sps) * centered_kernel_spectrum(taps, n_samples)
    return sfft.ifft(spec)


def cascade_response(taps: RrcTaps) -> np.ndarray:
    """Shape-then-match response sampled at symbol spacing, lags -span..span."""
    h = taps.coefficients
    g = np.convolve(h, h)
    return g[:: taps.sps]


def _equalizer_spectrum(taps: RrcTaps, m: int) -> np.ndarray:
    g = cascade_response(taps)
    lags = np.arange(len(g)) - len(g) // 2
    gm = np.zeros(m)
    np.add.at(gm, lags % m, g)
    return sfft.fft(gm).real


def noise_gain(taps: RrcTaps, n_symbols: int, cyclic: bool = True) -> float:
    """Variance gain of white noise through the matched filter and equalizer."""
    m = n_symbols if cyclic else n_symbols + 2 * taps.span
    return float(np.mean(1.0 / _equalizer_spectrum(taps, m)))


def mix_carrier(trace: ComplexTrace, f_c: float, phi0: float = 0.0) -> ComplexTrace:
    """Multiply sample k by exp(j(2*pi*f_c*k/f_s + phi0))."""
    if abs(f_c) >= trace.sample_rate / 2:
        raise ParameterError(f"carrier {f_c} Hz aliases at {trace.sample_rate} S/s")
    k = np.arange(len(trace))
    rot = np.exp(1j * (2 * np.pi * f_c / trace.sample_rate * k + phi0))
    return ComplexTrace(trace.samples * rot, trace.sample_rate, trace.t0)


def band_mask(n: int, sample_rate: float, f_lo: float, f_hi: float,
              transition: float = 50e6) -> np.ndarray:
    """Zero-phase mask: flat in the core, raised-cosine roll-off inside the
    band edges and exactly zero outside [f_lo, f_hi]."""
    if not f_lo < f_hi:
        raise ParameterError(f"empty band [{f_lo}, {f_hi}]")
    if f_lo < -sample_rate / 2 or f_hi > sample_rate / 2:
        raise ParameterError("band exceeds the Nyquist interval")
    f = sfft.fftfreq(n, d=1.0 / sample_rate)
    tw = min(transition, (f_hi - f_lo) / 2)
    d = np.minimum(f - f_lo, f_hi - f)
    mask = np.zeros(n)
    inside = d >= 0
    if tw > 0:
        mask[inside] = np.where(d[inside] >= tw, 1.0, 0.5 * (1 - np.cos(np.pi * d[inside] / tw)))
    else:
        mask[inside] = 1.0
    return mask


def band_select(trace: ComplexTrace, f_lo: float, f_hi: float,
                transition: float = 50e6) -> ComplexTrace:
    mask = band_mask(len(trace), trace.sample_rate, f_lo, f_hi, transition)
    if not mask.any():
        raise ParameterError("band contains no frequency bins")
    y = sfft.ifft(sfft.fft(trace.samples) * mask)
    return ComplexTrace(y, trace.sample_rate, trace.t0)


def matched_filter_downsample(
    trace: ComplexTrace,
    taps: RrcTaps,
    symbol_offset: int = 0,
    cyclic: bool = False,
    equalize: bool = True,
    role: Literal["quantum", "pilot"] = "quantum",
) -> SymbolBlock:
    """Matched filter, symbol-rate sampling and (optionally) zero-forcing of
    the residual inter-symbol interference of the truncated filter pair.

    In linear mode the trace is taken to be a full-convolution output, so
    symbol k peaks at sample ``(len(taps) - 1) / 2 + k*sps`` of the input; in
    cyclic mode it is one period of a circularly shaped frame with symbol k at
    sample ``k*sps``.
    """
    sps, span, h = taps.sps, taps.span, taps.coefficients
    if int(symbol_offset) != symbol_offset or not 0 <= symbol_offset < sps:
        raise ParameterError(f"symbol_offset must be an integer in [0, {sps})")
    x = trace.samples
    if len(x) < len(h):
        raise InsufficientDataError(f"trace of {len(x)} samples is shorter than the filter")
    if cyclic:
        n = len(x) // sps
        if len(x) != n * sps:
            raise ParameterError("cyclic trace length must be a multiple of sps")
        y = sfft.ifft(sfft.fft(x) * centered_kernel_spectrum(taps, len(x)))
        out = y[np.arange(n) * sps + symbol_offset]
        if equalize:
            out = sfft.ifft(sfft.fft(out) / _equalizer_spectrum(taps, n))
        gain = noise_gain(taps, n, True) if equalize else 1.0
        return SymbolBlock(out, role, noise_gain=gain)

    n = (len(x) - len(h) + 1) // sps
    y = fftconvolve(x, h)
    y = np.concatenate([y, np.zeros(sps)])
    base = len(h) - 1 + symbol_offset
    if not equalize:
        return SymbolBlock(y[base + np.arange(n) * sps], role)
    k = np.arange(-span, n + span)
    m = n + 2 * span
    ym = np.zeros(m, dtype=complex)
    ym[k % m] = y[base + k * sps]
    s = sfft.ifft(sfft.fft(ym) / _equalizer_spectrum(taps, m))[:n]
    return SymbolBlock(s, role, noise_gain=noise_gain(taps, n, False))
