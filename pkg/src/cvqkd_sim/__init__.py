"""Simulator and analysis toolkit for pilot-aided, locally generated
oscillator CV-QKD over fading free-space channels."""
from .dsp import ComplexTrace, FrameLayout, RrcTaps, SymbolBlock, design_rrc
from .errors import CvqkdError

__version__ = "0.1.0"

__all__ = ["ComplexTrace", "CvqkdError", "FrameLayout", "RrcTaps", "SymbolBlock", "design_rrc"]
