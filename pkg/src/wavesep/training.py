"""Supervised training of the separator, augmentation, and the remix step.

The supervised loss is the per-source mean absolute error summed over
sources. After each main batch, with probability ``remix_probability``, one
extra step is taken on a remixed example ``m_i + s_i`` built from an
unlabelled excerpt ``m_i`` in which source i is silent and an isolated stem
``s_i``:

    mean|est_i - s_i| + lambda * mean|sum_{j != i} est_j - m_i|

using a separate Adam state with a learning rate ``remix_lr_ratio`` times the
main one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .audio import SOURCES, TrackDataset, Waveform, convert
from .autodiff import AdamState, Tensor, adam_step, backward, ops, zero_grads
from .errors import ContractError, NumericError, ShapeError
from .extraction import EXTRACTABLE
from .model import Demucs, valid_length


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 16
    lr: float = 5e-4
    lr_decay_every: int = 160
    lr_decay: float = 5.0
    loss: str = "l1"
    augment: bool = True
    remix_enabled: bool = False
    remix_probability: float = 0.25
    remix_lr_ratio: float = 0.1
    remix_lambda: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("l1", "mse"):
            raise ContractError(f"unknown loss {self.loss!r}")
        if self.lr <= 0 or self.lr_decay <= 0 or self.remix_lr_ratio <= 0:
            raise ContractError("rates must be positive")
        if not 0.0 <= self.remix_probability <= 1.0:
            raise ContractError("remix_probability must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.lr_decay_every < 1:
            raise ContractError("invalid epochs, batch size or decay period")
        if self.remix_lambda < 0:
            raise ContractError("remix_lambda must be >= 0")


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule: divided by ``lr_decay`` every ``lr_decay_every`` epochs."""
    return config.lr / config.lr_decay ** (epoch // config.lr_decay_every)


def separation_loss(est: Tensor, ref, kind: str = "l1") -> Tensor:
    """Mean error over batch, channels and time, summed over sources (axis 1)."""
    ref = np.asarray(ref.data if isinstance(ref, Tensor) else ref)
    if est.shape != ref.shape:
        raise ShapeError(f"estimate shape {est.shape} != reference shape {ref.shape}")
    per_element = ops.l1_loss(est, ref) if kind == "l1" else ops.mse_loss(est, ref)
    return ops.scale(per_element, float(est.shape[1]))


def augment(stems: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Augment a ``(B, 4, C, T)`` batch of stems; the mixture is their sum.

    Each source is permuted across the batch independently, circularly shifted
    in time (same shift on every channel), channel-swapped with probability
    0.5 (stereo only) and each channel's sign flipped with probability 0.5.
    """
    batch, n_src, channels, length = stems.shape
    out = np.empty_like(stems)
    for s in range(n_src):
        perm = rng.permutation(batch)
        for b in range(batch):
            x = stems[perm[b], s]
            x = np.roll(x, int(rng.integers(length)), axis=-1)
            if channels == 2 and rng.random() < 0.5:
                x = x[::-1]
            signs = np.where(rng.random(channels) < 0.5, -1.0, 1.0).astype(stems.dtype)
            out[b, s] = x * signs[:, None]
    return out


def run_model(model: Demucs, mix: np.ndarray) -> Tensor:
    """Forward on ``(B, C, T)`` with symmetric zero padding to a valid length; trimmed output."""
    length = mix.shape[-1]
    target = valid_length(length, model.config)
    left = (target - length) // 2
    if target != length:
        mix = np.pad(mix, ((0, 0), (0, 0), (left, target - length - left)))
    est = model.forward(mix)
    if target != length:
        est = ops.index(est, (slice(None), slice(None), slice(None), slice(left, left + length)))
    return est


@dataclass
class UnlabeledSets:
    """Harvested excerpts per source, already in the training rate and channel layout."""

    excerpts: dict[str, list[np.ndarray]] = field(default_factory=dict)

    @classmethod
    def prepare(cls, sets: dict[str, list[Waveform]], sample_rate: int, mono: bool) -> "UnlabeledSets":
        out = {}
        for name, waves in sets.items():
            if name not in EXTRACTABLE:
                continue
            out[name] = [convert(w, sample_rate, mono).samples for w in waves]
        return cls(out)

    def available(self) -> list[str]:
        return [name for name in EXTRACTABLE if self.excerpts.get(name)]


def _crop(x: np.ndarray, length: int, rng) -> np.ndarray:
    if x.shape[-1] <= length:
        return np.pad(x, ((0, 0), (0, length - x.shape[-1])))
    start = int(rng.integers(x.shape[-1] - length + 1))
    return x[:, start:start + length]


def _isolated_source(dataset: TrackDataset, index: int, rng, attempts: int = 100) -> np.ndarray:
    """Random segment-length crop of source ``index``, resampled until it is not all zero."""
    for _ in range(attempts):
        track = dataset.load(int(rng.integers(len(dataset))))
        crop = _crop(track.stems[index], dataset.segment_length, rng)
        if np.any(crop):
            return crop
    raise ContractError(f"could not find a non-silent {SOURCES[index]} crop")


def remix_loss(est: Tensor, target: np.ndarray, excerpt: np.ndarray, index: int, lam: float) -> Tensor:
    """``mean|est_i - s_i| + lam * mean|sum_{j != i} est_j - m_i|`` for one example ``(1, 4, C, T)``."""
    first = ops.l1_loss(ops.index(est, (0, index)), target)
    if lam == 0.0:
        return first
    others = [j for j in range(est.shape[1]) if j != index]
    rest = ops.sum(ops.index(est, (0, others)), axis=0)
    return ops.add(first, ops.scale(ops.l1_loss(rest, excerpt), lam))


def remix_step(model: Demucs, unlabeled: UnlabeledSets, dataset: TrackDataset, config: TrainConfig,
               remix_optim: AdamState, rng: np.random.Generator) -> float | None:
    """One remix gradient step; returns the loss, or None when no excerpts are available."""
    names = unlabeled.available()
    if not names:
        return None
    name = names[int(rng.integers(len(names)))]
    index = SOURCES.index(name)
    pool = unlabeled.excerpts[name]
    excerpt = _crop(pool[int(rng.integers(len(pool)))], dataset.segment_length, rng)
    source = _isolated_source(dataset, index, rng)
    mix = (excerpt + source)[None].astype(np.float32)
    est = run_model(model, mix)
    loss = remix_loss(est, source, excerpt, index, config.remix_lambda)
    params = model.parameters()
    backward(loss)
    adam_step(params, remix_optim)
    zero_grads(params)
    return loss.item()


@dataclass
class EpochStats:
    epoch: int
    loss: float
    remix_loss: float
    remix_steps: int
    remix_skipped: int
    batches: int
    lr: float

    def line(self) -> str:
        return (f"epoch={self.epoch} loss={self.loss:.6f} remix_loss={self.remix_loss:.6f} "
                f"remix_steps={self.remix_steps} remix_skipped={self.remix_skipped} "
                f"batches={self.batches} lr={self.lr:.6g}")


def epoch_rng(config: TrainConfig, epoch: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, epoch])


def train_epoch(model: Demucs, dataset: TrackDataset, config: TrainConfig, optim: AdamState,
                epoch: int, unlabeled: UnlabeledSets | None = None,
                remix_optim: AdamState | None = None) -> EpochStats:
    rng = epoch_rng(config, epoch)
    optim.lr = lr_at(epoch, config)
    if remix_optim is not None:
        remix_optim.lr = optim.lr * config.remix_lr_ratio
    segments = dataset.segments()
    order = rng.permutation(len(segments))
    params = model.parameters()
    total = 0.0
    seen = 0
    remix_total, remix_steps, remix_skipped, batches = 0.0, 0, 0, 0
    for b in range(0, len(order), config.batch_size):
        idx = order[b:b + config.batch_size]
        stems = np.stack([dataset.segment(*segments[i]) for i in idx])
        if config.augment:
            stems = augment(stems, rng)
        est = run_model(model, stems.sum(axis=1))
        loss = separation_loss(est, stems, config.loss)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at epoch {epoch}")
        backward(loss)
        adam_step(params, optim)
        zero_grads(params)
        total += value * len(idx)
        seen += len(idx)
        batches += 1
        if config.remix_enabled and rng.random() < config.remix_probability:
            result = None
            if unlabeled is not None and remix_optim is not None:
                result = remix_step(model, unlabeled, dataset, config, remix_optim, rng)
            if result is None:
                remix_skipped += 1
            else:
                remix_total += result
                remix_steps += 1
    return EpochStats(epoch, total / max(seen, 1), remix_total / max(remix_steps, 1),
                      remix_steps, remix_skipped, batches, optim.lr)


def train(model: Demucs, dataset: TrackDataset, config: TrainConfig,
          unlabeled: UnlabeledSets | None = None, log: Callable[[str], None] | None = None,
          on_epoch: Callable[[EpochStats], None] | None = None, start_epoch: int = 0) -> list[EpochStats]:
    if len(dataset) == 0:
        raise ContractError("training set is empty")
    optim = AdamState(lr=config.lr)
    remix_optim = AdamState(lr=config.lr * config.remix_lr_ratio) if config.remix_enabled else None
    history = []
    for epoch in range(start_epoch, config.epochs):
        stats = train_epoch(model, dataset, config, optim, epoch, unlabeled, remix_optim)
        history.append(stats)
        if log is not None:
            log(stats.line())
        if on_epoch is not None:
            on_epoch(stats)
    return history
