"""Demucs: convolutional encoder, BiLSTM bottleneck, transposed-conv decoder.

Encoder layer i: ``ReLU(Conv(C[i-1] -> C[i], K, S))`` then a 1x1 conv to
``2 C[i]`` channels and a GLU. The bottleneck runs a BiLSTM over the deepest
encoder output and a 1x1 conv with ReLU brings ``2 C[L]`` back to ``C[L]``.
Decoder layer i: ``ReLU(Conv(C[i] -> C[i], 3, 1))`` on the incoming stream,
concatenation with encoder output i, a 1x1 conv ``2 C[i] -> 2 C[i]`` with GLU,
then ``ConvTranspose(C[i] -> C[i-1], K, S)`` with ReLU. The last decoder layer
emits ``sources * C[0]`` channels with no activation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .audio import SOURCES, SourceSet, Waveform
from .autodiff import (Param, Tensor, as_tensor, bilstm_forward, he_init, load_checkpoint,
                       no_grad, ops, pack_config, rescale_param, save_checkpoint, unpack_config)
from .errors import ContractError, FormatError, ShapeError

CONFIG_KIND = b"DMCS"
CONFIG_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 6
    input_channels: int = 2
    initial_channels: int = 48
    growth: int = 2
    kernel: int = 8
    stride: int = 4
    lstm_layers: int = 2
    use_glu: bool = True
    use_bilstm: bool = True
    rescale_reference: float = 0.1  # 0 disables rescaling
    rescale_lstm: bool = False
    rescale_power: float = 1.0  # stored weight = w / alpha**power
    sources: int = 4
    sample_rate: int = 44100  # rate the model is trained at; separate() callers resample to it

    def __post_init__(self):
        if self.depth < 1:
            raise ContractError("depth must be >= 1")
        if not self.kernel > self.stride >= 1:
            raise ContractError("need kernel > stride >= 1")
        if self.input_channels not in (1, 2):
            raise ContractError("input_channels must be 1 or 2")
        if self.rescale_reference < 0:
            raise ContractError("rescale_reference must be >= 0")

    @property
    def channels(self) -> list[int]:
        """``[C0, C1, ..., CL]``."""
        return [self.input_channels] + [self.initial_channels * self.growth ** i
                                        for i in range(self.depth)]

    def to_bytes(self) -> bytes:
        return pack_config(CONFIG_KIND, CONFIG_VERSION, asdict(self).items())

    @classmethod
    def from_bytes(cls, block: bytes) -> "ModelConfig":
        kind, version, values = unpack_config(block)
        if kind != CONFIG_KIND or version != CONFIG_VERSION:
            raise FormatError(f"not a separator config (kind={kind!r}, version={version})")
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


def valid_length(length: int, config: ModelConfig) -> int:
    """Smallest length >= ``length`` the encoder divides exactly and the decoder restores."""
    t = int(length)
    for _ in range(config.depth):
        t = max(1, math.ceil((t - config.kernel) / config.stride) + 1)
    for _ in range(config.depth):
        t = (t - 1) * config.stride + config.kernel
    return t


def encoder_lengths(length: int, config: ModelConfig) -> list[int]:
    """Frame count after each encoder layer for an admissible input length."""
    out = []
    t = length
    for _ in range(config.depth):
        t = (t - config.kernel) // config.stride + 1
        out.append(t)
    return out


def parameter_count(config: ModelConfig) -> int:
    """Closed-form number of scalar parameters."""
    ch = config.channels
    k = config.kernel
    rewrite = 2 if config.use_glu else 1
    total = 0
    for i in range(1, config.depth + 1):
        total += ch[i - 1] * ch[i] * k + ch[i]
        total += ch[i] * rewrite * ch[i] + rewrite * ch[i]
        total += ch[i] * ch[i] * 3 + ch[i]
        total += 2 * ch[i] * rewrite * ch[i] + rewrite * ch[i]
        out = config.sources * ch[0] if i == 1 else ch[i - 1]
        total += ch[i] * out * k + out
    if config.use_bilstm:
        h = ch[-1]
        for layer in range(config.lstm_layers):
            cin = h if layer == 0 else 2 * h
            total += 2 * (4 * h * cin + 4 * h * h + 4 * h)
        total += 2 * h * h + h
    return total


class Demucs:
    """The separator; parameters live in :attr:`params` in creation order."""

    def __init__(self, config: ModelConfig, params: dict[str, Param]):
        self.config = config
        self.params = params

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def _w(self, name: str) -> Tensor:
        return self.params[name].effective()

    def _conv(self, x, name, stride=1):
        return ops.conv1d(x, self._w(name + ".weight"), self._w(name + ".bias"), stride)

    def _rewrite(self, x, name):
        x = self._conv(x, name)
        return ops.glu(x, axis=1) if self.config.use_glu else ops.relu(x)

    def encode(self, x: Tensor) -> list[Tensor]:
        cfg = self.config
        skips = []
        for i in range(1, cfg.depth + 1):
            x = ops.relu(self._conv(x, f"encoder.{i}.conv", cfg.stride))
            x = self._rewrite(x, f"encoder.{i}.rewrite")
            skips.append(x)
        return skips

    def bottleneck(self, x: Tensor) -> Tensor:
        """BiLSTM over time (time-major), back to channel-major, then 1x1 conv + ReLU."""
        cfg = self.config
        if not cfg.use_bilstm:
            return x
        layers = [(self._w(f"lstm.{k}.w_ih"), self._w(f"lstm.{k}.w_hh"), self._w(f"lstm.{k}.bias"))
                  for k in range(cfg.lstm_layers)]
        seq = bilstm_forward(ops.transpose(x, (2, 0, 1)), layers)
        return ops.relu(self._conv(ops.transpose(seq, (1, 2, 0)), "lstm.proj"))

    def forward(self, mix) -> Tensor:
        """``(B, C0, T)`` mixture to ``(B, sources, C0, T)`` estimates."""
        cfg = self.config
        x = as_tensor(mix)
        if x.ndim != 3 or x.shape[1] != cfg.input_channels:
            raise ShapeError(f"expected (B, {cfg.input_channels}, T) input, got {x.shape}")
        batch, _, length = x.shape
        if valid_length(length, cfg) != length:
            raise ShapeError(f"length {length} is not valid; use valid_length() = "
                             f"{valid_length(length, cfg)}")
        skips = self.encode(x)
        x = self.bottleneck(skips[-1])
        for i in range(cfg.depth, 0, -1):
            x = ops.relu(self._conv(ops.pad_last(x, 1, 1), f"decoder.{i}.conv"))
            x = ops.concat([x, skips[i - 1]], axis=1)
            x = self._rewrite(x, f"decoder.{i}.rewrite")
            x = ops.conv_transpose1d(x, self._w(f"decoder.{i}.tconv.weight"),
                                     self._w(f"decoder.{i}.tconv.bias"), cfg.stride)
            if i > 1:
                x = ops.relu(x)
        return ops.reshape(x, (batch, cfg.sources, cfg.input_channels, length))

    __call__ = forward

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, ((p.name, p.tensor.data, p.scale) for p in self.parameters()),
                        self.config.to_bytes())


def new_model(config: ModelConfig, seed: int = 0) -> Demucs:
    """He-initialised model (biases zero, LSTM forget bias 1), then rescaled when enabled."""
    rng = np.random.default_rng(seed)
    params: dict[str, Param] = {}
    rescalable: list[Param] = []
    ch = config.channels
    k = config.kernel
    rewrite = 2 if config.use_glu else 1

    def add(name, shape, fan_in=None, rescale=False, fill=0.0):
        if fan_in is None:
            data = np.full(shape, fill, dtype=np.float32)
        else:
            data = he_init(shape, fan_in, rng)
        p = params[name] = Param.of(data, name)
        if rescale:
            rescalable.append(p)

    def conv(name, cout, cin, kernel):
        add(name + ".weight", (cout, cin, kernel), cin * kernel, rescale=True)
        add(name + ".bias", (cout,))

    for i in range(1, config.depth + 1):
        conv(f"encoder.{i}.conv", ch[i], ch[i - 1], k)
        conv(f"encoder.{i}.rewrite", rewrite * ch[i], ch[i], 1)
    if config.use_bilstm:
        h = ch[-1]
        for layer in range(config.lstm_layers):
            cin = h if layer == 0 else 2 * h
            add(f"lstm.{layer}.w_ih", (2, 4 * h, cin), cin, rescale=config.rescale_lstm)
            add(f"lstm.{layer}.w_hh", (2, 4 * h, h), h)
            bias = np.zeros((2, 4 * h), dtype=np.float32)
            bias[:, h:2 * h] = 1.0
            params[f"lstm.{layer}.bias"] = Param.of(bias, f"lstm.{layer}.bias")
        conv("lstm.proj", h, 2 * h, 1)
    for i in range(config.depth, 0, -1):
        conv(f"decoder.{i}.conv", ch[i], ch[i], 3)
        conv(f"decoder.{i}.rewrite", rewrite * ch[i], 2 * ch[i], 1)
        out = config.sources * ch[0] if i == 1 else ch[i - 1]
        # each transposed-conv output sums over ch[i] * K / S inputs
        fan_in = max(1, ch[i] * k // config.stride)
        add(f"decoder.{i}.tconv.weight", (ch[i], out, k), fan_in, rescale=True)
        add(f"decoder.{i}.tconv.bias", (out,))

    if config.rescale_reference > 0:
        for p in rescalable:
            rescale_param(p, config.rescale_reference, config.rescale_power)
    return Demucs(config, params)


def load_model(path: str | Path) -> Demucs:
    block, entries = load_checkpoint(path)
    config = ModelConfig.from_bytes(block)
    reference = new_model(config, seed=0)
    params: dict[str, Param] = {}
    for name, array, scale in entries:
        if name not in reference.params:
            raise FormatError(f"{path}: unexpected parameter {name}")
        if array.shape != reference.params[name].shape:
            raise FormatError(f"{path}: {name} has shape {array.shape}, "
                              f"expected {reference.params[name].shape}")
        params[name] = Param(Tensor(array.copy(), requires_grad=True, dtype=array.dtype), name, scale)
    missing = set(reference.params) - set(params)
    if missing:
        raise FormatError(f"{path}: missing parameters {sorted(missing)}")
    return Demucs(config, {name: params[name] for name in reference.params})


def separate(model: Demucs, wave: Waveform) -> SourceSet:
    """Pad to a valid length (symmetric zeros), run the model, trim back."""
    cfg = model.config
    if wave.channels != cfg.input_channels:
        raise ShapeError(f"model expects {cfg.input_channels} channels, got {wave.channels}")
    length = wave.frames
    target = valid_length(max(length, 1), cfg)
    left = (target - length) // 2
    padded = np.pad(wave.samples, ((0, 0), (left, target - length - left)))
    with no_grad():
        est = model.forward(padded[None]).data[0]
    stems = est[:, :, left:left + length].astype(np.float32)
    return SourceSet(stems[:len(SOURCES)], wave.sample_rate)
