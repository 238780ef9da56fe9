"""Order-2 wavelet scattering features on 0.64 s windows with a 64 ms hop.

Filter plan at 16 kHz:

* first order: 48 analytic Gaussian (Morlet) band-pass filters, 8 per octave
  over 6 octaves, centres ``0.45 * fs * 2**(-k/8)`` from 7.2 kHz down to
  about 123 Hz;
* the first-order modulus is decimated to a 1 kHz envelope;
* second order: 6 octave-wide filters centred on 4, 8, ..., 128 Hz applied
  to each envelope, kept only where ``f2 < f1``;
* both orders are averaged over each window with a normalised Hann window.

The result has shape ``(7, 48, n_windows)``: channel 0 holds first-order
coefficients, channel ``1 + j`` the second-order coefficients for the j-th
lowest ``f2``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view

from .audio import Waveform
from .errors import ContractError
from .windows import HOP_S, WINDOW_S, n_windows

SAMPLE_RATE = 16000
ENVELOPE_RATE = 1000
DECIMATION = SAMPLE_RATE // ENVELOPE_RATE
Q1 = 8
OCTAVES1 = 6
TOP_FRACTION = 0.45
F2_CENTRES = (4.0, 8.0, 16.0, 32.0, 64.0, 128.0)
Q2 = 1
# FWHM of each Gaussian equals the spacing to the next lower centre
_FWHM = 2.0 * np.sqrt(2.0 * np.log(2.0))


def first_order_centres(sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    k = np.arange(Q1 * OCTAVES1)
    return TOP_FRACTION * sample_rate * 2.0 ** (-k / Q1)


def _bandwidth(centre, q):
    return centre * (1.0 - 2.0 ** (-1.0 / q)) / _FWHM


def gaussian_filters(n: int, rate: float, centres, q: int) -> np.ndarray:
    """Analytic filters on the full FFT grid of length ``n``: zero at DC and negative frequencies."""
    freqs = sfft.fftfreq(n, 1.0 / rate)
    centres = np.asarray(centres, dtype=np.float64)[:, None]
    sigma = _bandwidth(centres, q)
    filt = np.exp(-0.5 * ((freqs[None, :] - centres) / sigma) ** 2)
    filt[:, freqs <= 0] = 0.0
    return filt


@lru_cache(maxsize=8)
def _hann(length: int) -> np.ndarray:
    w = np.hanning(length + 2)[1:-1]
    return w / w.sum()


def window_average(x: np.ndarray, count: int, rate: int = ENVELOPE_RATE) -> np.ndarray:
    """Hann-weighted mean of ``x[..., t]`` over each analysis window."""
    length = int(round(WINDOW_S * rate))
    hop = int(round(HOP_S * rate))
    need = (count - 1) * hop + length
    if x.shape[-1] < need:
        pad = [(0, 0)] * (x.ndim - 1) + [(0, need - x.shape[-1])]
        x = np.pad(x, pad)
    frames = sliding_window_view(x[..., :need], length, axis=-1)[..., ::hop, :]
    return frames @ _hann(length)


def _decimate(u: np.ndarray, n_low: int) -> np.ndarray:
    """Band-limit and downsample real rows by DECIMATION via FFT truncation."""
    spec = sfft.rfft(u, axis=-1)
    keep = n_low // 2 + 1
    return sfft.irfft(spec[..., :keep], n_low, axis=-1) / DECIMATION


def scatter2(wave: Waveform, chunk: int = 8) -> np.ndarray:
    """Scattering features ``(7, 48, n_windows)``, float32 and non-negative."""
    if wave.channels != 1 or wave.sample_rate != SAMPLE_RATE:
        raise ContractError(f"scatter2 needs mono {SAMPLE_RATE} Hz input, got "
                            f"{wave.channels} channels at {wave.sample_rate} Hz")
    x = wave.samples[0].astype(np.float64)
    count = n_windows(x.size, SAMPLE_RATE)
    n_f1 = Q1 * OCTAVES1
    out = np.zeros((1 + len(F2_CENTRES), n_f1, count), dtype=np.float32)
    if count == 0:
        return out
    n = -(-x.size // DECIMATION) * DECIMATION
    n_low = n // DECIMATION
    spectrum = sfft.fft(np.pad(x, (0, n - x.size)))
    centres = first_order_centres()
    filters1 = gaussian_filters(n, SAMPLE_RATE, centres, Q1)
    filters2 = gaussian_filters(n_low, ENVELOPE_RATE, F2_CENTRES, Q2)
    for lo in range(0, n_f1, chunk):
        hi = min(n_f1, lo + chunk)
        band = sfft.ifft(spectrum[None, :] * filters1[lo:hi], axis=-1)
        envelope = np.maximum(_decimate(np.abs(band), n_low), 0.0)
        out[0, lo:hi] = window_average(envelope, count)
        env_spec = sfft.fft(envelope, axis=-1)
        second = np.abs(sfft.ifft(env_spec[:, None, :] * filters2[None], axis=-1))
        pooled = window_average(second, count)  # (rows, 6, count)
        keep = np.asarray(F2_CENTRES)[None, :] < centres[lo:hi, None]
        out[1:, lo:hi] = np.where(keep[..., None], pooled, 0.0).transpose(1, 0, 2)
    return out
