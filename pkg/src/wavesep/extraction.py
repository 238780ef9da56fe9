"""Threshold calibration and harvesting of excerpts where one source is silent.

A source's threshold ``p`` is the lowest probability such that, on labelled
calibration windows, at least 95% of the windows with ``P >= p`` have the
source at or below -20 dB relative volume, counting only thresholds that
select at least 50 windows. Runs of consecutive windows at or above ``p``
lasting 5 s or more are cut from the original-rate audio.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import SOURCES, SourceSet, Waveform, list_track_dirs, read_wav, write_wav
from .detector import Detector, track_features, window_probabilities, window_volumes
from .errors import ContractError, FormatError
from .windows import HOP_S, window_length

log = logging.getLogger(__name__)

TARGET_PRECISION = 0.95
QUIET_DB = -20.0
MIN_SELECTED = 50
MIN_EXCERPT_S = 5.0
# no dataset is harvested for "other"
EXTRACTABLE = ("drums", "bass", "vocals")
CALIBRATION_FORMAT = "wavesep-thresholds"
CALIBRATION_VERSION = 1


@dataclass
class ThresholdCalibration:
    thresholds: dict[str, float | None]
    precision: dict[str, float | None]
    selected: dict[str, int]
    windows: dict[str, int]
    settings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"format": CALIBRATION_FORMAT, "version": CALIBRATION_VERSION,
               "thresholds": self.thresholds, "precision": self.precision,
               "selected": self.selected, "windows": self.windows, "settings": self.settings}
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ThresholdCalibration":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"threshold file is not valid JSON: {exc}") from exc
        if doc.get("format") != CALIBRATION_FORMAT or doc.get("version") != CALIBRATION_VERSION:
            raise FormatError("not a threshold file")
        return cls(doc["thresholds"], doc["precision"], doc["selected"], doc["windows"],
                   doc.get("settings", {}))


def precision_sweep(probs, quiet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Every distinct threshold (descending) with selected count and precision of ``P >= t``."""
    probs = np.asarray(probs, dtype=np.float64).ravel()
    quiet = np.asarray(quiet, dtype=bool).ravel()
    order = np.argsort(-probs, kind="stable")
    p = probs[order]
    hits = np.cumsum(quiet[order])
    # last index of every group of equal probabilities
    ends = np.flatnonzero(np.append(p[1:] != p[:-1], True))
    counts = ends + 1
    return p[ends], counts, hits[ends] / counts


def choose_threshold(probs, quiet, target: float = TARGET_PRECISION,
                     min_selected: int = MIN_SELECTED) -> tuple[float | None, float | None, int]:
    """Lowest threshold meeting the precision target; ``(None, None, 0)`` when none does."""
    thresholds, counts, precision = precision_sweep(probs, quiet)
    ok = np.flatnonzero((precision >= target) & (counts >= min_selected))
    if ok.size == 0:
        return None, None, 0
    k = ok[-1]
    return float(thresholds[k]), float(precision[k]), int(counts[k])


def calibrate_from_arrays(probs: list[np.ndarray], volumes: list[np.ndarray],
                          target: float = TARGET_PRECISION, quiet_db: float = QUIET_DB,
                          min_selected: int = MIN_SELECTED) -> ThresholdCalibration:
    """Calibrate from per-track ``(4, T_w)`` probabilities and relative volumes in dB."""
    if not probs:
        raise ContractError("calibration needs at least one track")
    cal = ThresholdCalibration({}, {}, {}, {}, {"target_precision": target, "quiet_db": quiet_db,
                                                  "min_selected": min_selected})
    for i, name in enumerate(SOURCES):
        p = np.concatenate([pr[i, :min(pr.shape[1], v.shape[1])] for pr, v in zip(probs, volumes)])
        v = np.concatenate([vo[i, :min(pr.shape[1], vo.shape[1])] for pr, vo in zip(probs, volumes)])
        thr, prec, count = choose_threshold(p, v <= quiet_db, target, min_selected)
        cal.thresholds[name] = thr
        cal.precision[name] = prec
        cal.selected[name] = count
        cal.windows[name] = int(p.size)
    return cal


def calibrate_thresholds(detector: Detector, calib_set: list[SourceSet], **kwargs) -> ThresholdCalibration:
    if not calib_set:
        raise ContractError("calibration set is empty")
    probs = [window_probabilities(detector, track_features(t.mixture_wave())) for t in calib_set]
    volumes = [window_volumes(t) for t in calib_set]
    return calibrate_from_arrays(probs, volumes, **kwargs)


@dataclass
class SilentExcerpt:
    source: str
    origin: str
    start: int  # samples at the original rate
    end: int
    mean_prob: float
    audio: Waveform | None = None

    @property
    def duration_frames(self) -> int:
        return self.end - self.start


def qualifying_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as inclusive ``(first, last)`` window indices."""
    mask = np.asarray(mask, dtype=bool)
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1) - 1
    return list(zip(starts.tolist(), stops.tolist()))


def run_to_samples(first: int, last: int, sample_rate: int, frames: int) -> tuple[int, int]:
    start = int(round(first * HOP_S * sample_rate))
    end = int(round(last * HOP_S * sample_rate)) + window_length(sample_rate)
    return start, min(end, frames)


def excerpts_from_probs(probs: np.ndarray, calibration: ThresholdCalibration, wave: Waveform,
                        origin: str = "", sources=EXTRACTABLE,
                        min_s: float = MIN_EXCERPT_S) -> list[SilentExcerpt]:
    """Cut excerpts of ``wave`` from per-window probabilities ``(4, T_w)``."""
    out = []
    for name in sources:
        thr = calibration.thresholds.get(name)
        if thr is None:
            log.info("no threshold for %s; skipped", name)
            continue
        row = probs[SOURCES.index(name)]
        for first, last in qualifying_runs(row >= thr):
            start, end = run_to_samples(first, last, wave.sample_rate, wave.frames)
            if end - start < min_s * wave.sample_rate - 1e-9:
                continue
            out.append(SilentExcerpt(name, origin, start, end, float(row[first:last + 1].mean()),
                                     Waveform(wave.samples[:, start:end].copy(), wave.sample_rate)))
    return out


def extract_silent_segments(detector: Detector, calibration: ThresholdCalibration, wave: Waveform,
                            origin: str = "", sources=EXTRACTABLE) -> list[SilentExcerpt]:
    """Detect on a 16 kHz mono copy, cut from ``wave`` at its own rate and channel count."""
    probs = window_probabilities(detector, track_features(wave))
    return excerpts_from_probs(probs, calibration, wave, origin, sources)


MANIFEST = "manifest.tsv"


@dataclass
class ManifestRow:
    source: str
    origin: str
    start: int
    end: int
    mean_prob: float
    path: str

    def line(self) -> str:
        return "\t".join([self.source, self.origin, str(self.start), str(self.end),
                          f"{self.mean_prob:.6f}", self.path])

    @classmethod
    def parse(cls, line: str) -> "ManifestRow":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 6:
            raise FormatError(f"bad manifest line: {line!r}")
        return cls(parts[0], parts[1], int(parts[2]), int(parts[3]), float(parts[4]), parts[5])


def _excerpt_name(ex: SilentExcerpt) -> str:
    return f"{ex.origin}_{ex.start}_{ex.end}.wav"


def build_unlabeled_sets(detector: Detector, calibration: ThresholdCalibration, corpus_root,
                         out_root, workers: int = 1) -> dict[str, list[ManifestRow]]:
    """Harvest every mixture under ``corpus_root`` into ``out_root/D_<source>/``."""
    out_root = Path(out_root)
    tracks = list_track_dirs(corpus_root) if Path(corpus_root).is_dir() else []

    def harvest(track_dir: Path):
        try:
            wave = read_wav(track_dir / "mixture.wav")
            return extract_silent_segments(detector, calibration, wave, track_dir.name)
        except (OSError, FormatError) as exc:
            log.error("%s: %s", track_dir, exc)
            return []

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(harvest, tracks))
    else:
        results = [harvest(t) for t in tracks]

    manifests: dict[str, list[ManifestRow]] = {name: [] for name in SOURCES}
    for excerpts in results:
        for ex in excerpts:
            rel = f"D_{ex.source}/{_excerpt_name(ex)}"
            try:
                (out_root / f"D_{ex.source}").mkdir(parents=True, exist_ok=True)
                write_wav(out_root / rel, ex.audio)
            except OSError as exc:
                log.error("%s: %s", rel, exc)
                continue
            manifests[ex.source].append(ManifestRow(ex.source, ex.origin, ex.start, ex.end,
                                                    ex.mean_prob, rel))
    for name, rows in manifests.items():
        folder = out_root / f"D_{name}"
        folder.mkdir(parents=True, exist_ok=True)
        (folder / MANIFEST).write_text("".join(r.line() + "\n" for r in rows))
    return manifests


def load_unlabeled_sets(root) -> dict[str, list[Waveform]]:
    """Read back every harvested excerpt, keyed by source name."""
    root = Path(root)
    sets: dict[str, list[Waveform]] = {name: [] for name in SOURCES}
    for name in SOURCES:
        manifest = root / f"D_{name}" / MANIFEST
        if not manifest.is_file():
            continue
        for line in manifest.read_text().splitlines():
            if line.strip():
                row = ManifestRow.parse(line)
                sets[name].append(read_wav(root / row.path))
    return sets
