"""Analysis window grid shared by labelling, scattering and extraction.

Window ``t`` covers ``[t * HOP_S, t * HOP_S + WINDOW_S)`` seconds. At a given
sample rate the start frame is ``round(t * HOP_S * rate)`` and the length is
``round(WINDOW_S * rate)``.
"""

from __future__ import annotations

import numpy as np

WINDOW_S = 0.64
HOP_S = 0.064


def window_length(sample_rate: int) -> int:
    return int(round(WINDOW_S * sample_rate))


def n_windows(frames: int, sample_rate: int) -> int:
    length = window_length(sample_rate)
    if frames < length:
        return 0
    # tolerate float rounding of the hop at rates where it is not integral
    return int(np.floor((frames - length) / (HOP_S * sample_rate) + 1e-9)) + 1


def window_starts(frames: int, sample_rate: int) -> np.ndarray:
    count = n_windows(frames, sample_rate)
    return np.round(np.arange(count) * HOP_S * sample_rate).astype(np.int64)


def window_energies(signal: np.ndarray, sample_rate: int) -> np.ndarray:
    """Sum of squares over every window; ``signal`` is ``(..., T)``.

    Channels (all leading axes but the first when 3-D) are summed, so a
    ``(4, C, T)`` stack yields ``(4, n_windows)``.
    """
    sq = np.asarray(signal, dtype=np.float64) ** 2
    if sq.ndim == 3:
        sq = sq.sum(axis=1)
    starts = window_starts(sq.shape[-1], sample_rate)
    length = window_length(sample_rate)
    csum = np.concatenate([np.zeros(sq.shape[:-1] + (1,)), np.cumsum(sq, axis=-1)], axis=-1)
    return csum[..., starts + length] - csum[..., starts]
