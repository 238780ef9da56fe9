"""Per-window silent-source probabilities from scattering features.

Network, with ``w`` the width multiplier (128 reproduces the full-size
layout 7 -> 128 -> 128 -> 256 -> ... -> 1024):

    BN; conv5x5 7->w; conv5x5 w->w; conv1x1 w->2w (ReLU each); maxpool 5/2
    BN; conv5x5 2w->2w; conv5x5 2w->2w; conv1x1 2w->4w; maxpool 5/2
    BN; conv (F_left x 1) 4w->8w collapsing frequency
    BiLSTM hidden 8w, 2 layers, dropout 0.18 between layers
    conv1x1 16w->8w + BN + ReLU; conv1x1 8w->4 -> one logit per source

All convolutions are valid, so output step ``j`` sees input windows
``4j .. 4j+36``; it is assigned to window ``4j + 18``. At least 37 windows are
required. Features enter through ``log(1 + x / log_eps)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .audio import SourceSet, Waveform, convert
from .autodiff import (AdamState, Param, Tensor, adam_step, backward, bilstm_forward, he_init,
                       load_checkpoint, no_grad, ops, pack_config, save_checkpoint, unpack_config,
                       zero_grads)
from .autodiff.ops import BatchNormState
from .errors import ContractError, FormatError, ShapeError
from .metrics import is_silent
from .scattering import SAMPLE_RATE, scatter2
from .windows import window_energies

CONFIG_KIND = b"DTCT"
CONFIG_VERSION = 1
LABEL_THRES_DB = -13.0
POOL_K, POOL_S, CONV_K = 5, 2, 5


@dataclass(frozen=True)
class DetectorConfig:
    width: int = 8
    in_channels: int = 7
    n_freq: int = 48
    lstm_layers: int = 2
    dropout: float = 0.18
    log_eps: float = 1e-4
    sources: int = 4

    @classmethod
    def full_scale(cls) -> "DetectorConfig":
        return cls(width=128)

    def to_bytes(self) -> bytes:
        return pack_config(CONFIG_KIND, CONFIG_VERSION, asdict(self).items())

    @classmethod
    def from_bytes(cls, block: bytes) -> "DetectorConfig":
        kind, version, values = unpack_config(block)
        if kind != CONFIG_KIND or version != CONFIG_VERSION:
            raise FormatError(f"not a detector config (kind={kind!r}, version={version})")
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


def _pool_len(n):
    return (n - POOL_K) // POOL_S + 1


def collapsed_freq(n_freq: int) -> int:
    """Frequency rows left before the collapsing convolution."""
    f = _pool_len(n_freq - 2 * (CONV_K - 1))
    return _pool_len(f - 2 * (CONV_K - 1))


def output_length(n_win: int) -> int:
    """Detector time steps for ``n_win`` input windows (0 when too short)."""
    t = n_win - 2 * (CONV_K - 1)
    if t < POOL_K:
        return 0
    t = _pool_len(t) - 2 * (CONV_K - 1)
    if t < POOL_K:
        return 0
    return _pool_len(t)


MIN_WINDOWS = 37
RECEPTIVE = 37
OUTPUT_STRIDE = POOL_S * POOL_S
OUTPUT_OFFSET = RECEPTIVE // 2


def output_centres(n_out: int) -> np.ndarray:
    return OUTPUT_STRIDE * np.arange(n_out) + OUTPUT_OFFSET


class Detector:
    def __init__(self, config: DetectorConfig, params: dict[str, Param], norms: dict[str, BatchNormState]):
        self.config = config
        self.params = params
        self.norms = norms

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def _t(self, name):
        return self.params[name].effective()

    def _conv(self, x, name, relu=True):
        y = ops.conv2d(x, self._t(name + ".weight"), self._t(name + ".bias"))
        return ops.relu(y) if relu else y

    def _bn(self, x, name, training):
        return ops.batch_norm(x, self._t(name + ".gamma"), self._t(name + ".beta"),
                              self.norms[name], training)

    def logits(self, feats, training: bool = False, rng=None) -> Tensor:
        """``(B, 7, F, T_w)`` features to ``(B, 4, T_out)`` logits."""
        cfg = self.config
        x = np.asarray(feats.data if isinstance(feats, Tensor) else feats)
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2] != cfg.n_freq:
            raise ShapeError(f"detector expects (B, {cfg.in_channels}, {cfg.n_freq}, T) features, "
                             f"got {x.shape}")
        if x.shape[3] < MIN_WINDOWS:
            raise ShapeError(f"detector needs at least {MIN_WINDOWS} windows, got {x.shape[3]}")
        x = Tensor(np.log1p(np.maximum(x, 0) / cfg.log_eps))
        x = self._bn(x, "bn0", training)
        x = self._conv(x, "block1.conv1")
        x = self._conv(x, "block1.conv2")
        x = self._conv(x, "block1.conv3")
        x = ops.max_pool2d(x, POOL_K, POOL_S)
        x = self._bn(x, "bn1", training)
        x = self._conv(x, "block2.conv1")
        x = self._conv(x, "block2.conv2")
        x = self._conv(x, "block2.conv3")
        x = ops.max_pool2d(x, POOL_K, POOL_S)
        x = self._bn(x, "bn2", training)
        x = self._conv(x, "collapse")  # (B, 8w, 1, T)
        b, c, _, t = x.shape
        seq = ops.transpose(ops.reshape(x, (b, c, t)), (2, 0, 1))
        layers = [(self._t(f"lstm.{k}.w_ih"), self._t(f"lstm.{k}.w_hh"), self._t(f"lstm.{k}.bias"))
                  for k in range(cfg.lstm_layers)]
        seq = bilstm_forward(seq, layers, cfg.dropout, rng, training)
        x = ops.reshape(ops.transpose(seq, (1, 2, 0)), (b, seq.shape[2], 1, t))
        x = self._conv(x, "head.conv1", relu=False)
        x = ops.relu(self._bn(x, "head.bn", training))
        x = self._conv(x, "head.conv2", relu=False)
        return ops.reshape(x, (b, cfg.sources, t))

    def save(self, path: str | Path) -> None:
        entries = [(p.name, p.tensor.data, p.scale) for p in self.parameters()]
        for name, st in self.norms.items():
            entries.append((f"{name}.running_mean", st.mean, 1.0))
            entries.append((f"{name}.running_var", st.var, 1.0))
        save_checkpoint(path, entries, self.config.to_bytes())


def new_detector(config: DetectorConfig, seed: int = 0) -> Detector:
    rng = np.random.default_rng(seed)
    w = config.width
    params: dict[str, Param] = {}
    norms: dict[str, BatchNormState] = {}

    def conv(name, cout, cin, kh, kw):
        params[name + ".weight"] = Param.of(he_init((cout, cin, kh, kw), cin * kh * kw, rng), name + ".weight")
        params[name + ".bias"] = Param.of(np.zeros(cout, np.float32), name + ".bias")

    def bn(name, c):
        params[name + ".gamma"] = Param.of(np.ones(c, np.float32), name + ".gamma")
        params[name + ".beta"] = Param.of(np.zeros(c, np.float32), name + ".beta")
        norms[name] = BatchNormState(c)

    bn("bn0", config.in_channels)
    conv("block1.conv1", w, config.in_channels, CONV_K, CONV_K)
    conv("block1.conv2", w, w, CONV_K, CONV_K)
    conv("block1.conv3", 2 * w, w, 1, 1)
    bn("bn1", 2 * w)
    conv("block2.conv1", 2 * w, 2 * w, CONV_K, CONV_K)
    conv("block2.conv2", 2 * w, 2 * w, CONV_K, CONV_K)
    conv("block2.conv3", 4 * w, 2 * w, 1, 1)
    bn("bn2", 4 * w)
    f_left = collapsed_freq(config.n_freq)
    if f_left < 1:
        raise ContractError(f"{config.n_freq} frequency rows do not survive the conv stack")
    conv("collapse", 8 * w, 4 * w, f_left, 1)
    h = 8 * w
    for k in range(config.lstm_layers):
        cin = h if k == 0 else 2 * h
        params[f"lstm.{k}.w_ih"] = Param.of(he_init((2, 4 * h, cin), cin, rng), f"lstm.{k}.w_ih")
        params[f"lstm.{k}.w_hh"] = Param.of(he_init((2, 4 * h, h), h, rng), f"lstm.{k}.w_hh")
        bias = np.zeros((2, 4 * h), np.float32)
        bias[:, h:2 * h] = 1.0
        params[f"lstm.{k}.bias"] = Param.of(bias, f"lstm.{k}.bias")
    conv("head.conv1", h, 2 * h, 1, 1)
    bn("head.bn", h)
    conv("head.conv2", config.sources, h, 1, 1)
    return Detector(config, params, norms)


def load_detector(path: str | Path) -> Detector:
    block, entries = load_checkpoint(path)
    config = DetectorConfig.from_bytes(block)
    det = new_detector(config)
    seen = set()
    for name, array, scale in entries:
        if name.endswith(".running_mean") or name.endswith(".running_var"):
            norm, stat = name.rsplit(".", 1)
            if norm not in det.norms:
                raise FormatError(f"{path}: unexpected statistics {name}")
            setattr(det.norms[norm], "mean" if stat == "running_mean" else "var", array.astype(np.float64))
        elif name in det.params:
            if array.shape != det.params[name].shape:
                raise FormatError(f"{path}: {name} has shape {array.shape}")
            det.params[name] = Param(Tensor(array.copy(), requires_grad=True, dtype=array.dtype), name, scale)
        else:
            raise FormatError(f"{path}: unexpected parameter {name}")
        seen.add(name)
    missing = set(det.params) - seen
    if missing:
        raise FormatError(f"{path}: missing parameters {sorted(missing)}")
    return det


def detector_forward(model: Detector, feats: np.ndarray) -> np.ndarray:
    """Probabilities ``(4, T_out)`` for one ``(7, F, T_w)`` feature tensor (eval mode)."""
    with no_grad():
        logits = model.logits(np.asarray(feats)[None], training=False).data[0]
    return 0.5 * (np.tanh(0.5 * logits.astype(np.float64)) + 1.0)


def reflect_edges(feats: np.ndarray, width: int = OUTPUT_OFFSET) -> np.ndarray:
    """Mirror ``width`` windows onto both ends of the window axis."""
    feats = np.asarray(feats)
    return np.pad(feats, [(0, 0)] * (feats.ndim - 1) + [(width, width)], mode="reflect")


def window_probabilities(model: Detector, feats: np.ndarray) -> np.ndarray:
    """Per-window probabilities ``(4, T_w)``.

    The features are mirrored by half a receptive field at both ends, so the
    first output centre falls on window 0 rather than being extrapolated from
    window 18; windows between centres are linearly interpolated.
    """
    probs = detector_forward(model, reflect_edges(feats))
    count = np.asarray(feats).shape[-1]
    centres = output_centres(probs.shape[1]) - OUTPUT_OFFSET
    grid = np.arange(count)
    return np.stack([np.interp(grid, centres, row) for row in probs])


def track_features(wave: Waveform) -> np.ndarray:
    """Scattering features of a waveform after downmix and resampling to 16 kHz."""
    return scatter2(convert(wave, SAMPLE_RATE, mono=True))


def window_volumes(track: SourceSet) -> np.ndarray:
    """Relative volume in dB of every source over every window, ``(4, n_windows)``.

    Windows where the mixture is digital zero get ``-inf`` for every source.
    """
    src = window_energies(track.stems, track.sample_rate)
    mix = window_energies(track.mixture(), track.sample_rate)
    if mix.ndim == 2:
        mix = mix.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        vol = 10.0 * np.log10(src / mix[None, :])
    vol[:, mix == 0] = -np.inf
    vol[src == 0] = -np.inf
    return vol


def label_windows(track: SourceSet, thres: float = LABEL_THRES_DB) -> np.ndarray:
    """Boolean ``(4, n_windows)``: source silent over the window at ``thres`` dB."""
    return is_silent(window_volumes(track), thres)


@dataclass
class DetectorTrainConfig:
    epochs: int = 40
    batch: int = 64
    lr: float = 5e-4
    crop: int = 64  # windows per training example
    crop_stride: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.crop < MIN_WINDOWS:
            raise ContractError(f"crop must be at least {MIN_WINDOWS} windows")
        if self.epochs < 0 or self.batch < 1 or self.lr <= 0:
            raise ContractError("invalid detector training config")


def _crops(features, labels, crop, stride):
    out = []
    for k, (f, lab) in enumerate(zip(features, labels)):
        count = min(f.shape[-1], lab.shape[-1])
        if count < crop:
            continue
        out.extend((k, s) for s in range(0, count - crop + 1, stride))
    return out


def train_detector(features: list[np.ndarray], labels: list[np.ndarray],
                   config: DetectorTrainConfig = DetectorTrainConfig(),
                   model: Detector | None = None, log=None) -> tuple[Detector, list[float]]:
    """Adam on the per-source BCE summed over sources; returns the model and per-epoch mean loss."""
    crops = _crops(features, labels, config.crop, config.crop_stride)
    if not crops:
        raise ContractError("no training crops: tracks are shorter than the crop length")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = new_detector(DetectorConfig(), seed=config.seed)
    params = model.parameters()
    state = AdamState(lr=config.lr)
    n_out = output_length(config.crop)
    centres = output_centres(n_out)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(crops))
        total, seen = 0.0, 0
        for b in range(0, len(order), config.batch):
            idx = order[b:b + config.batch]
            x = np.stack([features[crops[i][0]][..., crops[i][1]:crops[i][1] + config.crop] for i in idx])
            y = np.stack([labels[crops[i][0]][:, crops[i][1] + centres] for i in idx]).astype(np.float32)
            logits = model.logits(x, training=True, rng=rng)
            loss = ops.scale(ops.bce_with_logits(logits, y), float(model.config.sources))
            backward(loss)
            adam_step(params, state)
            zero_grads(params)
            total += loss.item() * len(idx)
            seen += len(idx)
        history.append(total / seen)
        if log is not None:
            log(f"epoch={epoch} loss={history[-1]:.6f}")
    return model, history


def roc_auc(scores, positives) -> float:
    """Area under the ROC curve by the rank-sum statistic (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positives = np.asarray(positives, dtype=bool).ravel()
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))

