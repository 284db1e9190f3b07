"""Alice's side: Gaussian symbols, constant pilot, RRC shaping, frequency
multiplexing and the IQ-modulator imbalance."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from . import seeding
from .dsp import (ComplexTrace, FrameLayout, RrcTaps, SymbolBlock, design_rrc,
                  mix_carrier, periodic_shape, pulse_shape, upsample)
from .errors import ConfigurationError, ParameterError

ArrayOrFloat = Union[float, np.ndarray]


@dataclass(frozen=True)
class GaussianSource:
    seed: int
    per_quadrature_variance: float

    def __post_init__(self):
        if self.per_quadrature_variance <= 0:
            raise ParameterError("per-quadrature variance must be positive")

    @classmethod
    def for_modulation(cls, seed: int, v_a: float) -> "GaussianSource":
        """Source whose complex symbols have E|s|^2 = v_a."""
        return cls(seed, v_a / 2)


@dataclass(frozen=True)
class IqImbalance:
    """Q-path gain ratio ``d`` and extra Q-path rotation ``theta`` (rad)."""

    d: ArrayOrFloat = 1.0
    theta: ArrayOrFloat = 0.0

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        th = np.asarray(self.theta, dtype=float)
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise ParameterError("imbalance ratio d must be finite and positive")
        if np.any(np.abs(th) >= np.pi / 2):
            raise ParameterError("imbalance angle must lie in (-pi/2, pi/2)")

    @property
    def is_balanced(self) -> bool:
        return bool(np.all(np.asarray(self.d) == 1.0) and np.all(np.asarray(self.theta) == 0.0))


@dataclass
class TxFrame:
    baseband: ComplexTrace
    quantum_symbols: SymbolBlock
    pilot_symbols: SymbolBlock
    layout: FrameLayout
    cyclic: bool = True


def generate_quantum_symbols(src: GaussianSource, n: int, frame_index: int = 0) -> SymbolBlock:
    if n < 1:
        raise ParameterError("need at least one symbol")
    rng = seeding.stream(src.seed, seeding.TX, frame_index)
    xp = rng.standard_normal((2, n)) * np.sqrt(src.per_quadrature_variance)
    return SymbolBlock(xp[0] + 1j * xp[1], "quantum")


def pilot_symbols(layout: FrameLayout, n: Optional[int] = None) -> SymbolBlock:
    n = layout.n_symbols if n is None else n
    return SymbolBlock(np.full(n, layout.pilot_symbol), "pilot")


def check_band_plan(layout: FrameLayout, cyclic: bool = True) -> None:
    if abs(layout.f_pilot) <= layout.quantum_half_band:
        raise ConfigurationError(
            f"pilot at {layout.f_pilot:.4g} Hz falls inside the quantum band "
            f"(+-{layout.quantum_half_band:.4g} Hz)")
    if cyclic:
        cycles = layout.n_samples * layout.f_pilot / layout.sample_rate
        if abs(cycles - round(cycles)) > 1e-9:
            raise ConfigurationError(
                "pilot does not complete an integer number of cycles per frame; "
                "a replayed frame would carry a phase jump")


def assemble_frame(quantum: SymbolBlock, pilot: SymbolBlock, layout: FrameLayout,
                   taps: Optional[RrcTaps] = None, cyclic: bool = True) -> TxFrame:
    """Shaped quantum band at 0 Hz plus the shaped pilot moved to ``f_pilot``.

    With ``cyclic`` the frame is one period of the replayed waveform (circular
    shaping); otherwise the full linear convolution is kept.
    """
    if len(quantum) != len(pilot):
        raise ParameterError("quantum and pilot blocks differ in length")
    check_band_plan(layout, cyclic)
    taps = taps or design_rrc(layout.roll_off, layout.sps, layout.span)
    if cyclic:
        q = periodic_shape(quantum.symbols, taps)
        p = periodic_shape(pilot.symbols, taps)
    else:
        q = pulse_shape(upsample(quantum, layout.sps), taps).samples
        p = pulse_shape(upsample(pilot, layout.sps), taps).samples
    p = mix_carrier(ComplexTrace(p, layout.sample_rate), layout.f_pilot).samples
    return TxFrame(ComplexTrace(q + p, layout.sample_rate), quantum, pilot, layout, cyclic)


def imbalance_map(z: np.ndarray, d: ArrayOrFloat, theta: ArrayOrFloat) -> np.ndarray:
    """I + jQ  ->  I + jQ * d * exp(j*theta)."""
    z = np.asarray(z, dtype=complex)
    return z.real + 1j * z.imag * np.asarray(d) * np.exp(1j * np.asarray(theta))


def apply_iq_imbalance(frame: TxFrame, imb: IqImbalance) -> TxFrame:
    if imb.is_balanced:
        return frame
    n = len(frame.baseband)
    for v in (imb.d, imb.theta):
        if np.ndim(v) and np.size(v) != n:
            raise ParameterError("imbalance trace does not cover the frame")
    out = imbalance_map(frame.baseband.samples, imb.d, imb.theta)
    return replace(frame, baseband=ComplexTrace(out, frame.baseband.sample_rate, frame.baseband.t0))


def build_frame(layout: FrameLayout, seed: int, frame_index: int = 0,
                imbalance: Optional[IqImbalance] = None,
                taps: Optional[RrcTaps] = None) -> TxFrame:
    src = GaussianSource.for_modulation(seed, layout.v_a)
    q = generate_quantum_symbols(src, layout.n_symbols, frame_index)
    frame = assemble_frame(q, pilot_symbols(layout), layout, taps)
    return apply_iq_imbalance(frame, imbalance) if imbalance is not None else frame
