"""Relative volume, silence predicate and SDR/SIR/SAR by orthogonal projection.

Multichannel signals are flattened into one vector per signal. Ratios are
capped at +-300 dB so medians stay finite: a denominator no larger than
``1e-12 * |est|^2`` counts as zero and yields the cap.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .audio import SOURCES, SourceSet
from .errors import ContractError, ShapeError, UndefinedMetricError

CAP_DB = 300.0
GRAM_REG = 1e-10
DENOM_EPS = 1e-12
METRICS = ("sdr", "sir", "sar")
REPORT_FORMAT = "wavesep-eval"
REPORT_VERSION = 1


def relative_volume(source, mixture) -> float:
    """``10 log10(sum s_i^2 / sum s^2)`` in dB; ``-inf`` for an all-zero source."""
    source = np.asarray(source, dtype=np.float64)
    mixture = np.asarray(mixture, dtype=np.float64)
    if source.shape != mixture.shape:
        raise ShapeError(f"relative_volume: shapes {source.shape} and {mixture.shape} differ")
    den = float(np.sum(mixture * mixture))
    if den == 0.0:
        raise UndefinedMetricError("relative volume undefined for an all-zero mixture")
    num = float(np.sum(source * source))
    if num == 0.0:
        return -math.inf
    return 10.0 * math.log10(num / den)


def is_silent(volume: float, thres_db: float) -> bool:
    return volume <= thres_db


@dataclass
class BssDecomposition:
    s_target: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray
    sdr: float
    sir: float
    sar: float


def _ratio_db(num: float, den: float, eps: float) -> float:
    if den <= eps:
        return CAP_DB if num > 0 else -CAP_DB
    if num <= 0:
        return -CAP_DB
    return float(np.clip(10.0 * math.log10(num / den), -CAP_DB, CAP_DB))


def bss_eval(estimate, references, index: int) -> BssDecomposition:
    """Decompose ``estimate`` of reference ``index`` against all ``references``.

    ``references`` has one signal per leading index; every signal is flattened.
    """
    refs = np.asarray(references, dtype=np.float64)
    refs = refs.reshape(refs.shape[0], -1)
    est = np.asarray(estimate, dtype=np.float64).ravel()
    if est.size != refs.shape[1]:
        raise ShapeError(f"bss_eval: estimate has {est.size} samples, references {refs.shape[1]}")
    if not 0 <= index < refs.shape[0]:
        raise ContractError(f"bss_eval: index {index} out of range")
    target = refs[index]
    target_energy = float(target @ target)
    if target_energy == 0.0:
        raise UndefinedMetricError(f"bss_eval: reference {index} is all zero")

    s_target = (float(target @ est) / target_energy) * target
    gram = refs @ refs.T
    gram[np.diag_indices_from(gram)] += GRAM_REG * np.trace(gram)
    coef = cho_solve(cho_factor(gram), refs @ est)
    projection = coef @ refs
    e_interf = projection - s_target
    e_artif = est - projection

    eps = DENOM_EPS * float(est @ est)
    energy = lambda v: float(v @ v)  # noqa: E731
    return BssDecomposition(
        s_target, e_interf, e_artif,
        sdr=_ratio_db(energy(s_target), energy(e_interf + e_artif), eps),
        sir=_ratio_db(energy(s_target), energy(e_interf), eps),
        sar=_ratio_db(energy(projection), energy(e_artif), eps),
    )


@dataclass
class TrackReport:
    """Per-frame metrics; ``None`` marks a frame skipped for a silent reference."""

    name: str
    frames: dict[str, dict[str, list]] = field(default_factory=dict)


def evaluate_track(est: SourceSet, ref: SourceSet, frame_s: float = 1.0,
                   name: str | None = None) -> TrackReport:
    """bss_eval on non-overlapping frames of ``frame_s`` seconds; a trailing partial frame is dropped."""
    if est.stems.shape != ref.stems.shape:
        raise ShapeError(f"estimate shape {est.stems.shape} != reference shape {ref.stems.shape}")
    if est.sample_rate != ref.sample_rate:
        raise ShapeError("estimate and reference sample rates differ")
    frame = int(round(frame_s * ref.sample_rate))
    if frame < 1:
        raise ContractError("frame length must be at least one sample")
    n_frames = ref.frames // frame
    report = TrackReport(name if name is not None else ref.name)
    n_src = ref.stems.shape[0]
    for i in range(n_src):
        report.frames[SOURCES[i]] = {m: [] for m in METRICS}
    for f in range(n_frames):
        sl = slice(f * frame, (f + 1) * frame)
        refs = ref.stems[:, :, sl]
        for i in range(n_src):
            row = report.frames[SOURCES[i]]
            if not np.any(refs[i]):
                for m in METRICS:
                    row[m].append(None)
                continue
            d = bss_eval(est.stems[i, :, sl], refs, i)
            row["sdr"].append(d.sdr)
            row["sir"].append(d.sir)
            row["sar"].append(d.sar)
    return report


def median(values) -> float | None:
    """Median ignoring ``None``; even counts average the middle pair."""
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(np.median(np.asarray(vals, dtype=np.float64)))


@dataclass
class EvalReport:
    tracks: list[TrackReport]
    track_medians: dict[str, dict[str, dict[str, float | None]]]  # track -> source -> metric
    sources: dict[str, dict[str, float | None]]  # source -> metric
    all: dict[str, float | None]

    def to_json(self, config: dict | None = None) -> str:
        doc = {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "frame_policy": "skip frames whose reference is digital zero",
            "tracks": [{"name": t.name, "frames": t.frames,
                        "medians": self.track_medians[t.name]} for t in self.tracks],
            "aggregate": {"sources": self.sources, "all": self.all},
        }
        if config is not None:
            doc["config"] = config
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def aggregate(reports: list[TrackReport]) -> EvalReport:
    """Median over frames per track, then median over tracks.

    The "all" entry is the median of the per-track medians of every source
    taken together.
    """
    if not reports:
        raise ContractError("aggregate needs at least one track")
    names = [r.name for r in reports]
    if len(set(names)) != len(names):
        raise ContractError("track names must be unique")
    track_medians = {}
    for r in reports:
        track_medians[r.name] = {src: {m: median(rows[m]) for m in METRICS}
                                 for src, rows in r.frames.items()}
    sources = {}
    pooled = {m: [] for m in METRICS}
    for src in reports[0].frames:
        sources[src] = {}
        for m in METRICS:
            per_track = [track_medians[r.name][src][m] for r in reports]
            sources[src][m] = median(per_track)
            pooled[m].extend(per_track)
    return EvalReport(list(reports), track_medians, sources, {m: median(pooled[m]) for m in METRICS})
