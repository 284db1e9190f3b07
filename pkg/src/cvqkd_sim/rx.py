"""Bob's DSP chain.

Order of operations for one captured frame:

1. carrier recovery from the strongest spectral line (the pilot), which gives
   the per-sample phase alpha(t) and a de-rotated record;
2. frame synchronisation against a revealed block of quantum symbols;
3. pilot reconstruction and cancellation: the pilot is a shaped constant, so
   its full waveform (including the weak ripple lines the truncated filter
   leaves at multiples of the symbol rate) is rebuilt from the narrow-band
   pilot estimate and subtracted;
4. matched filtering and zero-forcing of the quantum band;
5. optional refinement: the demodulated quantum waveform is subtracted from
   the record so the pilot band is re-estimated free of quantum leakage, and
   steps 3-4 are repeated with the corrected phase;
6. per-symbol transmittance from the pilot power relative to a back-to-back
   calibration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np
import scipy.fft as sfft
from scipy.ndimage import uniform_filter1d

from .channel import ChannelTrace, DetectionRecord
from .dsp import (ComplexTrace, FrameLayout, RrcTaps, SymbolBlock, band_mask,
                  design_rrc, matched_filter_downsample, periodic_shape)
from .errors import (CalibrationError, ConfigurationError, InsufficientDataError,
                     LowPilotSnrError, SyncError, UnwrapError)
from .io import save_npz

SETTLE_CYCLES = 6


@dataclass(frozen=True)
class RxConfig:
    carrier_bandwidth: float = 8e6
    pilot_bandwidth: float = 2e6
    min_pilot_snr_db: float = 10.0
    sync_symbols: int = 20000
    sync_threshold: float = 0.5
    guard: Optional[int] = None
    smoothing_window: int = 64
    refine: bool = True
    dc_spur_ratio: float = 30.0
    low_pilot_fraction: float = 1e-4

    def guard_symbols(self, layout: FrameLayout) -> int:
        """Symbols dropped at each frame edge.

        Beyond half the filter span this covers the settling time of the
        narrow pilot filters, which ring wherever the channel is not periodic
        over the frame.
        """
        if self.guard is not None:
            return int(self.guard)
        narrowest = min(self.carrier_bandwidth, self.pilot_bandwidth) / 2
        settle = math.ceil(SETTLE_CYCLES * layout.symbol_rate / narrowest)
        return layout.span // 2 + settle

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class CarrierEstimate:
    alpha: np.ndarray
    mu2: np.ndarray
    f_peak: float
    snr: float
    unwrap_ok: bool = True


@dataclass
class SyncResult:
    offset: int
    peak: float
    confidence: float


@dataclass
class PilotDemodResult:
    """``mu4`` comes from the pilot sideband alone; ``mu_cd`` adds the mirrored
    image sideband, which reproduces the pilot as seen through the imbalanced
    modulator."""

    mu4: np.ndarray
    mu_cd: np.ndarray
    snr_p: float
    start: int = 0

    def __len__(self) -> int:
        return len(self.mu4)


@dataclass
class CalibrationReference:
    mu4_0: np.ndarray
    layout_hash: str
    detector_seed: Optional[int]
    start: int = 0

    def save(self, path) -> None:
        save_npz(path, mu4_0=self.mu4_0, layout_hash=self.layout_hash,
                 detector_seed=-1 if self.detector_seed is None else self.detector_seed,
                 start=self.start)

    @classmethod
    def load(cls, path) -> "CalibrationReference":
        with np.load(path) as z:
            seed = int(z["detector_seed"])
            return cls(z["mu4_0"], str(z["layout_hash"]), None if seed < 0 else seed, int(z["start"]))


@dataclass
class TransmittanceSeries:
    T: np.ndarray
    smoothing_window: int
    start: int = 0
    low_pilot: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.T)


@dataclass
class FrameResult:
    carrier: CarrierEstimate
    sync: SyncResult
    pilot: PilotDemodResult
    quantum: SymbolBlock
    transmittance: Optional[TransmittanceSeries]
    guard: int
    dc_removed: bool

    def summary(self) -> dict:
        out = {
            "pilot_frequency_hz": self.carrier.f_peak,
            "carrier_snr_db": _db(self.carrier.snr),
            "pilot_snr_db": _db(self.pilot.snr_p),
            "sync_offset": self.sync.offset,
            "sync_peak": self.sync.peak,
            "sync_confidence": self.sync.confidence,
            "unwrap_ok": self.carrier.unwrap_ok,
            "guard_symbols": self.guard,
            "dc_removed": self.dc_removed,
            "n_symbols": len(self.quantum),
        }
        if self.transmittance is not None:
            out["mean_T"] = float(np.mean(self.transmittance.T))
            out["low_pilot_symbols"] = int(np.count_nonzero(self.transmittance.low_pilot))
        return out


def _db(x: float) -> float:
    return float(10 * np.log10(x)) if x > 0 else float("-inf")


def _circ_offset(f: np.ndarray, fc: float, fs: float) -> np.ndarray:
    return (f - fc + fs / 2) % fs - fs / 2


@lru_cache(maxsize=8)
def _hann_line_mask(n: int, fs: float, fc: float, bandwidth: float) -> np.ndarray:
    """cos^2 window of total width ``bandwidth`` centred on ``fc`` (wraps at Nyquist)."""
    d = _circ_offset(sfft.fftfreq(n, 1 / fs), fc, fs)
    m = np.where(np.abs(d) < bandwidth / 2, np.cos(np.pi * d / bandwidth) ** 2, 0.0)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=4)
def _carrier(n: int, fs: float, f: float) -> np.ndarray:
    k = np.arange(n)
    c = np.exp(2j * np.pi * np.mod(f / fs * k, 1.0))
    c.setflags(write=False)
    return c


@lru_cache(maxsize=4)
def _pilot_envelope(layout: FrameLayout, taps_key: bytes) -> tuple[np.ndarray, float]:
    taps = design_rrc(layout.roll_off, layout.sps, layout.span)
    env = periodic_shape(np.ones(layout.n_symbols), taps).real
    c0 = float(np.sum(taps.coefficients) / layout.sps)
    env = env / c0
    env.setflags(write=False)
    return env, c0


def _envelope(layout: FrameLayout, taps: RrcTaps):
    return _pilot_envelope(layout, taps.coefficients.tobytes())


def _line_snr(power: np.ndarray, f: np.ndarray, fc: float, fs: float, mask: np.ndarray,
              bandwidth: float) -> float:
    """In-band SNR of a spectral line against the median noise floor nearby."""
    d = np.abs(_circ_offset(f, fc, fs))
    near = (d > bandwidth) & (d < 20 * bandwidth)
    noise_bin = np.median(power[near]) / np.log(2) if near.any() else 0.0
    m2 = mask**2
    noise = noise_bin * np.sum(m2)
    sig = np.sum(power * m2) - noise
    if noise <= 0:
        return float("inf")
    return max(float(sig / noise), 0.0)


def recover_carrier(rec: DetectionRecord, cfg: RxConfig = RxConfig()) -> tuple[CarrierEstimate, DetectionRecord]:
    """Estimate exp(j*alpha(t)) from the pilot line and de-rotate the record."""
    layout = rec.layout
    x = rec.samples.samples
    n, fs = len(x), rec.samples.sample_rate
    spec = sfft.fft(x)
    power = np.abs(spec) ** 2
    f = sfft.fftfreq(n, 1 / fs)
    f_peak = float(f[int(np.argmax(power))])
    mask = _hann_line_mask(n, fs, f_peak, cfg.carrier_bandwidth)
    snr = _line_snr(power, f, f_peak, fs, mask, cfg.carrier_bandwidth)
    if snr < 10 ** (cfg.min_pilot_snr_db / 10):
        raise LowPilotSnrError(f"pilot SNR {_db(snr):.1f} dB below {cfg.min_pilot_snr_db} dB")
    y = sfft.ifft(spec * mask)
    base = _carrier(n, fs, f_peak)
    psi = np.angle(y * np.conj(base))
    step = np.diff(psi)
    step = (step + np.pi) % (2 * np.pi) - np.pi
    if step.size and np.max(np.abs(step)) > np.pi / 2:
        raise UnwrapError("pilot phase moves more than pi/2 between samples")
    psi = psi[0] + np.concatenate([[0.0], np.cumsum(step)])
    psi -= np.angle(layout.pilot_symbol)
    offset = f_peak - layout.f_pilot
    k = np.arange(n)
    frac = np.mod(offset / fs * k, 1.0)
    mu2 = np.exp(1j * (2 * np.pi * frac + psi))
    alpha = 2 * np.pi * offset / fs * k + psi
    # the cos^2 mask passes in-band phase at less than unit gain; one flat-band
    # pass over the de-rotated pilot takes out what it left behind
    u = _sideband(x * np.conj(mu2), layout, cfg.carrier_bandwidth, +1, flat=True)
    delta = np.angle(u) - np.angle(layout.pilot_symbol)
    mu2 = mu2 * np.exp(1j * delta)
    alpha = alpha + delta
    comp = ComplexTrace(x * np.conj(mu2), fs, rec.samples.t0)
    return CarrierEstimate(alpha, mu2, f_peak, snr), replace(rec, samples=comp)


def sync_reference(symbols: SymbolBlock, layout: FrameLayout, n_ref: int) -> SymbolBlock:
    """The first ``n_ref`` quantum symbols, revealed for synchronisation."""
    n_ref = min(n_ref, len(symbols))
    return SymbolBlock(symbols.symbols[:n_ref], "quantum", start=symbols.start)


def _remove_pilot_lines(x: np.ndarray, layout: FrameLayout, bandwidth: float) -> np.ndarray:
    n, fs = len(x), layout.sample_rate
    spec = sfft.fft(x)
    keep = 1 - _hann_line_mask(n, fs, layout.f_pilot, bandwidth) - _hann_line_mask(n, fs, -layout.f_pilot, bandwidth)
    return spec * keep


def frame_sync(rec: DetectionRecord, reference: SymbolBlock, taps: Optional[RrcTaps] = None,
               cfg: RxConfig = RxConfig()) -> SyncResult:
    """Cyclic lag of the record relative to the transmitted frame.

    The reported peak is the normalised correlation at the best lag; the
    confidence is one minus the ratio of the largest sidelobe (beyond one
    pulse width) to that peak, so it is near zero when no lag stands out.
    """
    layout = rec.layout
    taps = taps or design_rrc(layout.roll_off, layout.sps, layout.span)
    x = rec.samples.samples
    n = len(x)
    if n != layout.n_samples:
        raise InsufficientDataError("record length does not match the frame layout")
    ref_syms = np.zeros(layout.n_symbols, dtype=complex)
    idx = (reference.start + np.arange(len(reference))) % layout.n_symbols
    ref_syms[idx] = reference.symbols
    ref = periodic_shape(ref_syms, taps)
    spec_x = _remove_pilot_lines(x, layout, 2 * cfg.carrier_bandwidth)
    xc = sfft.ifft(spec_x)
    corr = np.abs(sfft.ifft(spec_x * np.conj(sfft.fft(ref))))
    lag = int(np.argmax(corr))
    # energy of the record under the reference support at this lag
    support = np.roll(np.abs(ref) > 1e-6 * np.max(np.abs(ref)), lag)
    energy = np.sum(np.abs(xc[support]) ** 2)
    ref_energy = np.sum(np.abs(ref) ** 2)
    peak = float(corr[lag] / np.sqrt(max(energy * ref_energy, 1e-300)))
    width = layout.span * layout.sps
    d = np.abs((np.arange(n) - lag + n // 2) % n - n // 2)
    side = float(np.max(corr[d > width])) if np.any(d > width) else 0.0
    confidence = 1.0 - side / corr[lag] if corr[lag] > 0 else 0.0
    if confidence < cfg.sync_threshold:
        raise SyncError(f"no distinct correlation peak (confidence {confidence:.3f})")
    signed = lag - n if lag > n // 2 else lag
    return SyncResult(signed, peak, float(confidence))


def align_frame(rec: DetectionRecord, offset: int) -> DetectionRecord:
    """Undo a cyclic lag and the pilot phase it carried after de-rotation."""
    if offset == 0:
        return rec
    layout = rec.layout
    x = np.roll(rec.samples.samples, -offset)
    x = x * np.exp(-2j * np.pi * np.mod(layout.f_pilot / layout.sample_rate * offset, 1.0))
    truth = rec.truth
    if truth is not None:
        dfs = np.roll(truth.delta_f, -offset) if np.ndim(truth.delta_f) else truth.delta_f
        truth = ChannelTrace(np.roll(truth.T, -offset), np.roll(truth.theta_s, -offset),
                             np.roll(truth.theta_lo, -offset), dfs)
    return replace(rec, samples=ComplexTrace(x, rec.samples.sample_rate, rec.samples.t0), truth=truth)


@lru_cache(maxsize=4)
def _flat_mask(n: int, fs: float, bandwidth: float) -> np.ndarray:
    m = (np.abs(sfft.fftfreq(n, 1 / fs)) < bandwidth / 2).astype(float)
    m.setflags(write=False)
    return m


def _sideband(x: np.ndarray, layout: FrameLayout, bandwidth: float, sign: int,
              flat: bool = False) -> np.ndarray:
    """Narrow-band content around sign*f_pilot, mixed down to 0 Hz."""
    n, fs = len(x), layout.sample_rate
    car = _carrier(n, fs, layout.f_pilot)
    mixed = x * np.conj(car) if sign > 0 else x * car
    mask = _flat_mask(n, fs, bandwidth) if flat else _hann_line_mask(n, fs, 0.0, bandwidth)
    return sfft.ifft(sfft.fft(mixed) * mask)


def _symbol_pilot(u: np.ndarray, layout: FrameLayout, taps: RrcTaps) -> np.ndarray:
    """Matched-filter a pilot sideband and rescale so a clean pilot maps to
    its transmitted symbol."""
    mf = matched_filter_downsample(ComplexTrace(u, layout.sample_rate), taps, cyclic=True,
                                   equalize=False, role="pilot").symbols
    h0 = float(np.sum(taps.coefficients))
    return mf * layout.sps / h0**2


def pilot_waveform(x: np.ndarray, layout: FrameLayout, taps: RrcTaps, bandwidth: float) -> np.ndarray:
    """Reconstructed pilot and its modulator image, ready to subtract."""
    env, _ = _envelope(layout, taps)
    car = _carrier(len(x), layout.sample_rate, layout.f_pilot)
    u = _sideband(x, layout, bandwidth, +1)
    v = _sideband(x, layout, bandwidth, -1)
    return env * (u * car + v * np.conj(car))


def demodulate_pilot(rec: DetectionRecord, taps: RrcTaps, layout: FrameLayout,
                     cfg: RxConfig = RxConfig(), guard: Optional[int] = None,
                     quantum_waveform: Optional[np.ndarray] = None) -> PilotDemodResult:
    """Per-symbol pilot amplitudes; in the balanced noise-free case
    ``mu4 = sqrt(T*eta) * pilot_symbol``."""
    guard = cfg.guard_symbols(layout) if guard is None else guard
    x = rec.samples.samples
    if quantum_waveform is not None:
        x = x - quantum_waveform
    n, fs = len(x), layout.sample_rate
    if 2 * guard >= n // layout.sps:
        raise InsufficientDataError("guard consumes the whole frame")
    u = _sideband(x, layout, cfg.pilot_bandwidth, +1)
    v = _sideband(x, layout, cfg.pilot_bandwidth, -1)
    mu_u = _symbol_pilot(u, layout, taps)
    mu_v = _symbol_pilot(v, layout, taps)
    spec = sfft.fft(x)
    snr = _line_snr(np.abs(spec) ** 2, sfft.fftfreq(n, 1 / fs), layout.f_pilot, fs,
                    _hann_line_mask(n, fs, layout.f_pilot, cfg.pilot_bandwidth), cfg.pilot_bandwidth)
    sl = slice(guard, len(mu_u) - guard)
    return PilotDemodResult(mu_u[sl], (mu_u + mu_v)[sl], snr, guard)


def _dc_spur(spec: np.ndarray, ratio: float, width: int = 64) -> bool:
    neigh = np.concatenate([spec[1:width + 1], spec[-width:]])
    floor = np.median(np.abs(neigh) ** 2) / np.log(2)
    return bool(np.abs(spec[0]) ** 2 > ratio * floor)


def demodulate_quantum(rec: DetectionRecord, taps: RrcTaps, layout: FrameLayout,
                       cfg: RxConfig = RxConfig(), guard: Optional[int] = None,
                       pilot: Optional[np.ndarray] = None) -> tuple[SymbolBlock, bool]:
    """Quantum symbols after pilot cancellation, matched filter and
    zero-forcing.  The DC bin is cleared only when it stands out as a spur
    above the neighbouring spectrum.  Returns the block and whether DC was
    removed."""
    guard = cfg.guard_symbols(layout) if guard is None else guard
    x = rec.samples.samples
    if pilot is None:
        pilot = pilot_waveform(x, layout, taps, cfg.carrier_bandwidth)
    q = x - pilot
    spec = sfft.fft(q)
    dc = _dc_spur(spec, cfg.dc_spur_ratio)
    if dc:
        spec[0] = 0
        q = sfft.ifft(spec)
    blk = matched_filter_downsample(ComplexTrace(q, layout.sample_rate), taps, cyclic=True)
    n = len(blk)
    if 2 * guard >= n:
        raise InsufficientDataError("guard consumes the whole frame")
    return SymbolBlock(blk.symbols[guard:n - guard], "quantum", guard, blk.noise_gain), dc


def calibrate_reference(rec_b2b: DetectionRecord, reference: SymbolBlock,
                        taps: Optional[RrcTaps] = None, cfg: RxConfig = RxConfig(),
                        max_spread: float = 0.01) -> CalibrationReference:
    """Pilot amplitudes of a back-to-back capture, used as the 0 dB reference."""
    res = receive_frame(rec_b2b, reference, taps=taps, cfg=cfg)
    mu = res.pilot.mu4
    mag = np.abs(mu)
    spread = float(np.std(mag) / np.mean(mag))
    if spread > max_spread:
        raise CalibrationError(f"pilot amplitude spread {spread:.3g} exceeds {max_spread}")
    seed = rec_b2b.detector.seed if rec_b2b.detector is not None else None
    return CalibrationReference(mu, rec_b2b.layout.hash(), seed, res.pilot.start)


def estimate_transmittance(p: PilotDemodResult, cal: CalibrationReference, window: int = 64,
                           layout: Optional[FrameLayout] = None,
                           low_pilot_fraction: float = 1e-4) -> TransmittanceSeries:
    """T_i = |mu4_i|^2 / |mu4_0_i|^2 with a centred moving average."""
    if layout is not None and layout.hash() != cal.layout_hash:
        raise ConfigurationError("calibration was recorded with a different frame layout")
    if window < 1:
        raise ConfigurationError("smoothing window must be >= 1")
    if len(p) != len(cal.mu4_0) or p.start != cal.start:
        raise ConfigurationError("pilot block and calibration cover different symbols")
    ref = np.abs(cal.mu4_0) ** 2
    raw = np.abs(p.mu4) ** 2 / ref
    t = uniform_filter1d(raw, window, mode="nearest") if window > 1 else raw
    t = np.maximum(t, 0.0)
    low = raw < low_pilot_fraction
    return TransmittanceSeries(t, window, p.start, low)


def receive_frame(rec: DetectionRecord, reference: SymbolBlock, cal: Optional[CalibrationReference] = None,
                  taps: Optional[RrcTaps] = None, cfg: RxConfig = RxConfig()) -> FrameResult:
    layout = rec.layout
    taps = taps or design_rrc(layout.roll_off, layout.sps, layout.span)
    guard = cfg.guard_symbols(layout)
    carrier, comp = recover_carrier(rec, cfg)
    sync = frame_sync(comp, reference, taps, cfg)
    aligned = align_frame(comp, sync.offset)
    x = aligned.samples.samples

    pil = pilot_waveform(x, layout, taps, cfg.carrier_bandwidth)
    quantum, dc = demodulate_quantum(aligned, taps, layout, cfg, 0, pil)
    q_wave = None
    if cfg.refine:
        q_wave = periodic_shape(quantum.symbols, taps)
        # pilot band with the demodulated quantum leakage removed; a flat
        # passband so the first-pass phase error is taken out unweighted
        u = _sideband(x - q_wave, layout, cfg.carrier_bandwidth, +1, flat=True)
        delta = np.angle(u) - np.angle(layout.pilot_symbol)
        fix = np.exp(-1j * delta)
        x = x * fix
        q_wave = q_wave * fix
        delta_rec = np.roll(delta, sync.offset)
        carrier.alpha = carrier.alpha + delta_rec
        carrier.mu2 = carrier.mu2 * np.exp(1j * delta_rec)
        aligned = replace(aligned, samples=ComplexTrace(x, layout.sample_rate, aligned.samples.t0))
        pil = pilot_waveform(x - q_wave, layout, taps, cfg.carrier_bandwidth)
        quantum, dc = demodulate_quantum(aligned, taps, layout, cfg, 0, pil)
    n = len(quantum)
    if 2 * guard >= n:
        raise InsufficientDataError("guard consumes the whole frame")
    quantum = SymbolBlock(quantum.symbols[guard:n - guard], "quantum", guard, quantum.noise_gain)
    pilot = demodulate_pilot(aligned, taps, layout, cfg, guard, q_wave)
    series = None
    if cal is not None:
        series = estimate_transmittance(pilot, cal, cfg.smoothing_window, layout, cfg.low_pilot_fraction)
    return FrameResult(carrier, sync, pilot, quantum, series, guard, dc)


def pilot_symbol_snr(rec: DetectionRecord, taps: Optional[RrcTaps] = None) -> float:
    """Per-symbol pilot SNR after mixing the pilot to 0 Hz and matched filtering
    over the full symbol bandwidth."""
    layout = rec.layout
    taps = taps or design_rrc(layout.roll_off, layout.sps, layout.span)
    x = rec.samples.samples
    mixed = x * np.conj(_carrier(len(x), layout.sample_rate, layout.f_pilot))
    mu = matched_filter_downsample(ComplexTrace(mixed, layout.sample_rate), taps, cyclic=True,
                                   equalize=False).symbols
    return float(np.abs(np.mean(mu)) ** 2 / np.var(mu))
