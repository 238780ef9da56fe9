"""Waveform-domain music source separation with silence-based data extraction."""

from .audio import SOURCES, SourceSet, Waveform, read_wav, write_wav
from .errors import WavesepError

__version__ = "0.1.0"

__all__ = ["SOURCES", "SourceSet", "Waveform", "WavesepError", "read_wav", "write_wav"]
