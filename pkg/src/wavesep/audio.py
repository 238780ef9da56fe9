"""Waveform containers, WAV I/O, resampling and the on-disk track layout.

Every array handed around by this package is channel-major: ``(C, T)`` for a
single signal and ``(4, C, T)`` for a stack of sources ordered drums, bass,
other, vocals.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConsistencyError, DatasetError, FormatError, UnsupportedError

log = logging.getLogger(__name__)

SOURCES: tuple[str, ...] = ("drums", "bass", "other", "vocals")
MIXTURE_TOLERANCE = 1e-4

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


@dataclass
class Waveform:
    """Multichannel float32 buffer of shape ``(C, T)`` with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2 or samples.shape[0] not in (1, 2):
            raise UnsupportedError(f"expected 1 or 2 channels, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise FormatError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise FormatError(f"sample rate must be positive, got {self.sample_rate}")
        self.samples = samples
        self.sample_rate = int(self.sample_rate)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def frames(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.frames / self.sample_rate


@dataclass
class SourceSet:
    """The four sources of one track, stacked as ``(4, C, T)``."""

    stems: np.ndarray
    sample_rate: int
    name: str = ""

    def __post_init__(self):
        stems = np.asarray(self.stems, dtype=np.float32)
        if stems.ndim != 3 or stems.shape[0] != len(SOURCES) or stems.shape[1] not in (1, 2):
            raise UnsupportedError(f"expected stems of shape (4, C, T), got {stems.shape}")
        self.stems = stems
        self.sample_rate = int(self.sample_rate)

    @property
    def channels(self) -> int:
        return self.stems.shape[1]

    @property
    def frames(self) -> int:
        return self.stems.shape[2]

    def mixture(self) -> np.ndarray:
        return self.stems.sum(axis=0, dtype=np.float32)

    def source(self, index: int | str) -> Waveform:
        if isinstance(index, str):
            index = SOURCES.index(index)
        return Waveform(self.stems[index], self.sample_rate)

    def mixture_wave(self) -> Waveform:
        return Waveform(self.mixture(), self.sample_rate)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def read_wav(path: str | Path) -> Waveform:
    """Read a PCM16 or IEEE-float32 RIFF/WAVE file with one or two channels.

    PCM16 samples are scaled by 1/32768.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"{path}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            fmt = _parse_fmt(body, path)
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)

    if fmt is None or payload is None:
        raise FormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, bits = fmt
    if len(payload) % (channels * bits // 8):
        raise FormatError(f"{path}: data chunk is not a whole number of frames")
    if tag == _PCM:
        samples = np.frombuffer(payload, dtype="<i2").astype(np.float32) / np.float32(32768.0)
    else:
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    samples = samples.reshape(-1, channels).T.copy()
    return Waveform(samples, rate)


def _parse_fmt(body: bytes, path: Path):
    if len(body) < 16:
        raise FormatError(f"{path}: fmt chunk too short ({len(body)} bytes)")
    tag, channels, rate, _byte_rate, _align, bits = struct.unpack_from("<HHIIHH", body)
    if tag == _EXTENSIBLE:
        if len(body) < 26:
            raise FormatError(f"{path}: truncated WAVE_FORMAT_EXTENSIBLE header")
        (tag,) = struct.unpack_from("<H", body, 24)
    if channels == 0 or rate == 0:
        raise FormatError(f"{path}: zero channels or sample rate")
    if channels > 2:
        raise UnsupportedError(f"{path}: {channels} channels (only mono/stereo supported)")
    if (tag, bits) not in ((_PCM, 16), (_FLOAT, 32)):
        raise UnsupportedError(f"{path}: format tag {tag} with {bits} bits is not PCM16 or float32")
    return tag, channels, rate, bits


def write_wav(path: str | Path, wave: Waveform, encoding: str = "float32") -> None:
    """Write ``wave`` as PCM16 (clamped to [-1, 1]) or IEEE float32."""
    samples = wave.samples
    channels, frames = samples.shape
    if encoding == "pcm16":
        clipped = np.clip(samples, -1.0, 1.0).astype(np.float64)
        ints = np.clip(np.round(clipped * 32768.0), -32768, 32767).astype("<i2")
        payload = ints.T.tobytes()
        fmt = struct.pack("<HHIIHH", _PCM, channels, wave.sample_rate,
                          wave.sample_rate * channels * 2, channels * 2, 16)
        extra = b""
    elif encoding == "float32":
        payload = samples.astype("<f4").T.tobytes()
        fmt = struct.pack("<HHIIHHH", _FLOAT, channels, wave.sample_rate,
                          wave.sample_rate * channels * 4, channels * 4, 32, 0)
        extra = b"fact" + struct.pack("<II", 4, frames)
    else:
        raise ValueError(f"unknown encoding {encoding!r}")

    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + extra
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------------------
# Resampling and channel handling
# ---------------------------------------------------------------------------

RESAMPLE_TAPS = 64
KAISER_BETA = 8.0


@lru_cache(maxsize=16)
def _polyphase_table(up: int, down: int) -> np.ndarray:
    """Windowed-sinc taps, one row of ``RESAMPLE_TAPS`` per output phase."""
    half = RESAMPLE_TAPS // 2
    cutoff = min(1.0, up / down)
    # Tap j of phase r weighs input sample base + j - (half - 1).
    offsets = np.arange(RESAMPLE_TAPS) - (half - 1)
    frac = np.arange(up)[:, None] / up
    dist = offsets[None, :] - frac
    window = np.i0(KAISER_BETA * np.sqrt(np.clip(1.0 - (dist / half) ** 2, 0.0, None))) / np.i0(KAISER_BETA)
    taps = cutoff * np.sinc(cutoff * dist) * window
    taps /= taps.sum(axis=1, keepdims=True)
    return taps


def resample(wave: Waveform, target_rate: int, chunk: int = 1 << 15) -> Waveform:
    """Polyphase windowed-sinc resampling (64 taps per phase, Kaiser beta 8).

    The output has ``round(T * target / source)`` frames.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    src = wave.sample_rate
    if target_rate == src:
        return Waveform(wave.samples.copy(), src)
    g = math.gcd(src, target_rate)
    up, down = target_rate // g, src // g
    frames = wave.frames
    out_frames = (frames * target_rate + src // 2) // src
    taps = _polyphase_table(up, down)
    half = RESAMPLE_TAPS // 2
    padded = np.pad(wave.samples.astype(np.float64), ((0, 0), (half, half + 1)))
    out = np.empty((wave.channels, out_frames), dtype=np.float32)
    offsets = np.arange(RESAMPLE_TAPS)
    for lo in range(0, out_frames, chunk):
        n = np.arange(lo, min(out_frames, lo + chunk))
        pos = n * down
        base, phase = pos // up, pos % up
        # padded index of input sample (base + j - (half - 1)) is base + j + 1
        idx = base[:, None] + offsets[None, :] + 1
        weights = taps[phase]
        for c in range(wave.channels):
            out[c, n] = np.einsum("nk,nk->n", padded[c][idx], weights)
    return Waveform(out, target_rate)


def downmix_mono(wave: Waveform) -> Waveform:
    if wave.channels == 1:
        return Waveform(wave.samples.copy(), wave.sample_rate)
    return Waveform(wave.samples.mean(axis=0, keepdims=True, dtype=np.float32), wave.sample_rate)


def convert(wave: Waveform, sample_rate: int | None = None, mono: bool = False) -> Waveform:
    """Resample and/or downmix in one call; a no-op when nothing changes."""
    if mono:
        wave = downmix_mono(wave)
    if sample_rate is not None and sample_rate != wave.sample_rate:
        wave = resample(wave, sample_rate)
    return wave


# ---------------------------------------------------------------------------
# Track directories
# ---------------------------------------------------------------------------


def load_track_dir(path: str | Path) -> SourceSet:
    """Load ``<track>/{mixture,drums,bass,other,vocals}.wav`` and check the mixture.

    Raises DatasetError for a missing file or shape mismatch and
    ConsistencyError when the stored mixture deviates from the stem sum by more
    than ``MIXTURE_TOLERANCE`` (peak absolute).
    """
    path = Path(path)
    waves = {}
    for name in ("mixture",) + SOURCES:
        file = path / f"{name}.wav"
        if not file.is_file():
            raise DatasetError(f"{path}: missing {name}.wav")
        waves[name] = read_wav(file)
    ref = waves["mixture"]
    for name, w in waves.items():
        if w.samples.shape != ref.samples.shape or w.sample_rate != ref.sample_rate:
            raise DatasetError(
                f"{path}: {name}.wav has shape {w.samples.shape} @ {w.sample_rate} Hz, "
                f"mixture has {ref.samples.shape} @ {ref.sample_rate} Hz")
    stems = np.stack([waves[name].samples for name in SOURCES])
    track = SourceSet(stems, ref.sample_rate, name=path.name)
    deviation = float(np.max(np.abs(track.mixture() - ref.samples), initial=0.0))
    if deviation > MIXTURE_TOLERANCE:
        raise ConsistencyError(
            f"{path}: mixture differs from the sum of stems by {deviation:.4g} "
            f"(tolerance {MIXTURE_TOLERANCE})", deviation)
    return track


def write_track_dir(path: str | Path, track: SourceSet, encoding: str = "float32",
                    stems: bool = True) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_wav(path / "mixture.wav", Waveform(track.mixture(), track.sample_rate), encoding)
    if stems:
        for i, name in enumerate(SOURCES):
            write_wav(path / f"{name}.wav", Waveform(track.stems[i], track.sample_rate), encoding)


def list_track_dirs(root: str | Path) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: dataset root does not exist")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "mixture.wav").is_file())


@dataclass
class TrackDataset:
    """Labelled tracks on disk, cut into fixed-length segments.

    One epoch is every ``segment_length``-frame window taken with a hop of
    ``segment_stride`` frames, after converting each track to
    ``sample_rate`` (and to mono when ``mono`` is set).
    """

    root: Path
    tracks: list[Path]
    sample_rate: int
    segment_length: int
    segment_stride: int
    mono: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def open(cls, root: str | Path, sample_rate: int | None = None, segment_s: float = 5.0,
             stride_s: float = 0.5, mono: bool = False) -> "TrackDataset":
        tracks = list_track_dirs(root)
        if sample_rate is None:
            if not tracks:
                raise DatasetError(f"{root}: no track directories")
            sample_rate = read_wav(tracks[0] / "mixture.wav").sample_rate
        return cls(Path(root), tracks, int(sample_rate), int(round(segment_s * sample_rate)),
                   int(round(stride_s * sample_rate)), mono)

    def __len__(self) -> int:
        return len(self.tracks)

    @property
    def channels(self) -> int:
        return self.load(0).channels

    def load(self, index: int) -> SourceSet:
        if index not in self._cache:
            track = load_track_dir(self.tracks[index])
            if self.mono or track.sample_rate != self.sample_rate:
                stems = [convert(track.source(i), self.sample_rate, self.mono).samples
                         for i in range(len(SOURCES))]
                track = SourceSet(np.stack(stems), self.sample_rate, name=track.name)
            self._cache[index] = track
        return self._cache[index]

    def segments(self) -> list[tuple[int, int]]:
        """All ``(track index, start frame)`` pairs of one epoch, in order."""
        out = []
        for i in range(len(self.tracks)):
            frames = self.load(i).frames
            if frames < self.segment_length:
                out.append((i, 0))
                continue
            count = (frames - self.segment_length) // self.segment_stride + 1
            out.extend((i, k * self.segment_stride) for k in range(count))
        return out

    def segment(self, index: int, start: int) -> np.ndarray:
        stems = self.load(index).stems[:, :, start:start + self.segment_length]
        if stems.shape[-1] < self.segment_length:
            stems = np.pad(stems, ((0, 0), (0, 0), (0, self.segment_length - stems.shape[-1])))
        return stems

    def __iter__(self) -> Iterator[SourceSet]:
        for i in range(len(self.tracks)):
            yield self.load(i)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

DRUM_BAND = (2000.0, 6000.0)
BASS_RANGE = (40.0, 120.0)
BASS_HARMONICS = 8
PAD_ROOT_RANGE = (130.0, 190.0)
VOCAL_RANGE = (650.0, 950.0)
FADE_S = 0.01

SilencePlan = dict[int, Sequence[tuple[int | str, float, float]]]


def _bandpass_noise(rng, n, sample_rate, lo, hi):
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    return np.fft.irfft(spec, n)


def _phase(freq, sample_rate):
    return 2.0 * np.pi * np.cumsum(freq) / sample_rate


def _note_envelope(n, sample_rate, boundaries, ramp_s=0.02):
    """Unit envelope with short linear ramps at each note boundary."""
    env = np.ones(n)
    ramp = max(1, int(ramp_s * sample_rate))
    for b in boundaries:
        lo, hi = max(0, b - ramp), min(n, b + ramp)
        if hi > lo:
            env[lo:hi] = np.minimum(env[lo:hi], np.abs(np.arange(lo, hi) - b) / ramp)
    return env


def _synth_stems(rng, n, sample_rate):
    t = np.arange(n) / sample_rate
    beat = rng.uniform(0.2, 0.4)
    beat_frames = max(1, int(round(beat * sample_rate)))
    nyq = 0.45 * sample_rate

    # drums: band-passed noise gated by a decaying burst on every sixteenth of the beat;
    # no step is skipped, so a drum silence longer than a step only comes from a mute
    lo, hi = DRUM_BAND[0], min(DRUM_BAND[1], nyq)
    noise = _bandpass_noise(rng, n, sample_rate, lo, hi)
    env = np.zeros(n)
    tau = rng.uniform(0.03, 0.06)
    length = min(n, int(6 * tau * sample_rate))
    decay = np.exp(-np.arange(length) / (tau * sample_rate))
    for start in range(0, n, max(1, beat_frames // 4)):
        stop = min(n, start + length)
        env[start:stop] += rng.uniform(0.6, 1.0) * decay[:stop - start]
    drums = noise * env

    # bass: band-limited sawtooth notes, fundamentals between 40 and 120 Hz, two beats each
    note = 2 * beat_frames
    starts = np.arange(0, n, note)
    freq = np.repeat(rng.uniform(*BASS_RANGE, size=len(starts)), note)[:n]
    ph = _phase(freq, sample_rate)
    bass = sum(np.sin(k * ph) / k for k in range(1, BASS_HARMONICS + 1) if k * BASS_RANGE[1] < nyq)
    bass = bass * _note_envelope(n, sample_rate, starts[1:])

    # other: three-voice chord pad with a second harmonic, four beats per chord
    chord = 4 * beat_frames
    starts = np.arange(0, n, chord)
    roots = rng.uniform(*PAD_ROOT_RANGE, size=len(starts))
    thirds = rng.choice([5 / 4, 6 / 5], size=len(starts))
    other = np.zeros(n)
    for ratios in (np.ones(len(starts)), thirds, np.full(len(starts), 1.5)):
        f = np.repeat(roots * ratios, chord)[:n]
        ph = _phase(f, sample_rate)
        other += np.sin(ph) + 0.4 * np.sin(2 * ph)
    other *= _note_envelope(n, sample_rate, starts[1:], ramp_s=0.05)

    # vocals: vibrato tone with syllable-rate amplitude modulation
    phrase = 2 * beat_frames
    starts = np.arange(0, n, phrase)
    carrier = np.repeat(rng.uniform(*VOCAL_RANGE, size=len(starts)), phrase)[:n]
    vib_rate, vib_depth = rng.uniform(4.5, 6.0), rng.uniform(8.0, 20.0)
    ph = _phase(carrier + vib_depth * np.sin(2 * np.pi * vib_rate * t), sample_rate)
    syll = 0.85 + 0.15 * np.sin(2 * np.pi * rng.uniform(2.0, 4.0) * t + rng.uniform(0, 2 * np.pi))
    vocals = (np.sin(ph) + 0.3 * np.sin(2 * ph)) * syll * _note_envelope(n, sample_rate, starts[1:])

    stems = np.stack([drums, bass, other, vocals])
    rms = np.sqrt(np.mean(stems ** 2, axis=1, keepdims=True)) + 1e-12
    return stems / rms * 0.1


def _apply_mutes(stems, sample_rate, mutes):
    n = stems.shape[-1]
    fade = max(1, int(FADE_S * sample_rate))
    for source, start_s, end_s in mutes:
        i = SOURCES.index(source) if isinstance(source, str) else int(source)
        lo = max(0, int(round(start_s * sample_rate)))
        hi = min(n, int(round(end_s * sample_rate)))
        if hi <= lo:
            continue
        gain = np.ones(n)
        gain[lo:hi] = 0.0
        a = max(0, lo - fade)
        gain[a:lo] = np.minimum(gain[a:lo], (lo - np.arange(a, lo)) / fade)
        b = min(n, hi + fade)
        gain[hi:b] = np.minimum(gain[hi:b], (np.arange(hi, b) - hi + 1) / fade)
        stems[i] *= gain
    return stems


def synth_track(seed: int | np.random.SeedSequence, duration_s: float, sample_rate: int,
                channels: int = 2, mutes: Sequence[tuple[int | str, float, float]] = ()) -> SourceSet:
    """One synthetic 4-source track; ``mutes`` lists (source, start s, end s) to zero out."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    stems = _synth_stems(rng, n, sample_rate)
    if channels == 2:
        pan = rng.uniform(0.25, 0.75, size=(4, 1))
        stems = np.stack([stems * np.sqrt(2 * (1 - pan)), stems * np.sqrt(2 * pan)], axis=1)
    else:
        stems = stems[:, None, :]
    stems = _apply_mutes(stems, sample_rate, mutes)
    peak = np.max(np.abs(stems.sum(axis=0)))
    if peak > 0.9:
        stems *= 0.9 / peak
    return SourceSet(stems.astype(np.float32), sample_rate)


def synth_corpus(seed: int, n_tracks: int, duration_s: float, sample_rate: int,
                 silence_plan: SilencePlan | None, root: str | Path, channels: int = 2,
                 stems: bool = True) -> TrackDataset:
    """Write ``n_tracks`` synthetic tracks under ``root`` and open them as a dataset.

    Sources: band-passed noise bursts on a sixteenth-note grid (drums, 2-6 kHz),
    band-limited sawtooth notes with 40-120 Hz fundamentals (bass), a harmonic
    chord pad below 600 Hz (other) and a vibrato tone around 650-950 Hz
    (vocals). ``silence_plan`` maps a track
    index to the intervals where a source is exact digital zero. With
    ``stems=False`` only ``mixture.wav`` is written (an unlabelled corpus).
    """
    if duration_s < 6:
        raise ValueError("synthetic tracks must last at least 6 seconds")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_tracks)
    plan = silence_plan or {}
    for k in range(n_tracks):
        track = synth_track(children[k], duration_s, sample_rate, channels, plan.get(k, ()))
        write_track_dir(root / f"track{k:03d}", track, stems=stems)
    if not stems:
        return TrackDataset(root, [], sample_rate, int(5 * sample_rate), int(0.5 * sample_rate))
    return TrackDataset.open(root, sample_rate)


def random_silence_plan(seed: int, n_tracks: int, duration_s: float, per_track: int = 2,
                        min_s: float = 3.0, max_s: float = 10.0,
                        sources: Sequence[int] = (0, 1, 2, 3)) -> SilencePlan:
    """Random non-overlapping-in-time mute intervals, cycling through ``sources``."""
    rng = np.random.default_rng(seed)
    plan: SilencePlan = {}
    cursor = 0
    for k in range(n_tracks):
        intervals = []
        slot = duration_s / per_track
        for j in range(per_track):
            length = min(rng.uniform(min_s, max_s), slot - 0.5)
            start = j * slot + rng.uniform(0.0, max(0.0, slot - length))
            intervals.append((int(sources[cursor % len(sources)]), round(start, 3),
                              round(start + length, 3)))
            cursor += 1
        plan[k] = intervals
    return plan
