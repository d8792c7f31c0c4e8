"""Parameterized layers: dense, LSTM/BLSTM, conv backbone, batchnorm, dropout.

Initialization follows fan-in-scaled uniform draws; LSTM gate parameters are
serialized in (input, forget, cell, output) order and the forget-gate bias
starts at +1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, UsageError
from .tensor import Tensor


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class DenseLayer:
    weights: Tensor  # [in x out]
    bias: Tensor  # [out]

    @classmethod
    def init(cls, n_in: int, n_out: int, rng) -> "DenseLayer":
        return cls(T.parameter(_uniform(rng, (n_in, n_out), n_in)), T.parameter(np.zeros(n_out)))

    @property
    def n_in(self) -> int:
        return self.weights.shape[0]

    @property
    def n_out(self) -> int:
        return self.weights.shape[1]

    def parameters(self):
        return [("w", self.weights), ("b", self.bias)]


def dense_forward(layer: DenseLayer, x: Tensor) -> Tensor:
    """x [B x in] -> x W + b, bias broadcast over the batch."""
    if x.ndim != 2 or x.shape[1] != layer.n_in:
        raise ShapeError(f"dense layer expects [B x {layer.n_in}], got {x.shape}")
    return T.matmul(x, layer.weights) + layer.bias


_GATES = ("i", "f", "c", "o")


@dataclass
class LstmLayer:
    """One LSTM cell's parameters; gates ordered (input, forget, cell, output)."""

    w: dict  # gate -> input weights [in x H]
    u: dict  # gate -> recurrent weights [H x H]
    b: dict  # gate -> bias [H]
    hidden: int

    @classmethod
    def init(cls, n_in: int, hidden: int, rng) -> "LstmLayer":
        w = {g: T.parameter(_uniform(rng, (n_in, hidden), n_in)) for g in _GATES}
        u = {g: T.parameter(_uniform(rng, (hidden, hidden), hidden)) for g in _GATES}
        b = {g: T.parameter(np.full(hidden, 1.0 if g == "f" else 0.0)) for g in _GATES}
        return cls(w, u, b, hidden)

    @property
    def n_in(self) -> int:
        return self.w["i"].shape[0]

    def parameters(self):
        out = []
        for g in _GATES:
            out += [(f"w{g}", self.w[g]), (f"u{g}", self.u[g]), (f"b{g}", self.b[g])]
        return out


def _lstm_step(layer: LstmLayer, x: Tensor, h: Tensor, c: Tensor):
    gi = T.sigmoid(T.matmul(x, layer.w["i"]) + T.matmul(h, layer.u["i"]) + layer.b["i"])
    gf = T.sigmoid(T.matmul(x, layer.w["f"]) + T.matmul(h, layer.u["f"]) + layer.b["f"])
    gc = T.tanh(T.matmul(x, layer.w["c"]) + T.matmul(h, layer.u["c"]) + layer.b["c"])
    go = T.sigmoid(T.matmul(x, layer.w["o"]) + T.matmul(h, layer.u["o"]) + layer.b["o"])
    c_new = gf * c + gi * gc
    h_new = go * T.tanh(c_new)
    return h_new, c_new


def lstm_forward(layer: LstmLayer, seq: Tensor) -> Tensor:
    """Run the recurrence over seq [T x in] (or [T x B x in]) from zero state.

    Returns the hidden state at every step: [T x H] (or [T x B x H]).
    """
    squeeze = seq.ndim == 2
    if squeeze:
        seq = T.reshape(seq, (seq.shape[0], 1, seq.shape[1]))
    if seq.ndim != 3 or seq.shape[0] < 1:
        raise ShapeError(f"lstm expects [T x in] or [T x B x in] with T >= 1, got {seq.shape}")
    if seq.shape[2] != layer.n_in:
        raise ShapeError(f"lstm configured for width {layer.n_in}, got steps of width {seq.shape[2]}")
    steps, batch = seq.shape[0], seq.shape[1]
    h = Tensor(np.zeros((batch, layer.hidden)))
    c = Tensor(np.zeros((batch, layer.hidden)))
    outputs = []
    for t in range(steps):
        h, c = _lstm_step(layer, T.index_axis0(seq, t), h, c)
        outputs.append(h)
    out = T.stack0(outputs)
    return T.reshape(out, (steps, layer.hidden)) if squeeze else out


def blstm_forward(fwd: LstmLayer, bwd: LstmLayer, seq: Tensor) -> Tensor:
    """Bidirectional pass: per-step concat of forward and re-aligned backward states."""
    if fwd.hidden != bwd.hidden:
        raise ConfigError(f"blstm halves disagree on hidden size: {fwd.hidden} vs {bwd.hidden}")
    forward = lstm_forward(fwd, seq)
    reverse = T.flip_axis0(lstm_forward(bwd, T.flip_axis0(seq)))
    return T.concat([forward, reverse], axis=forward.ndim - 1)


class BatchNorm:
    """Per-feature normalization over the batch axis of [B x C] activations."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.scale = T.parameter(np.ones(channels))
        self.shift = T.parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.channels = channels

    def parameters(self):
        return [("scale", self.scale), ("shift", self.shift)]

    def state(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x: Tensor, mode: str) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects [B x {self.channels}], got {x.shape}")
        if mode == "train":
            if x.shape[0] < 2:
                raise UsageError("batchnorm train mode needs a batch of at least 2")
            mu = T.tmean(x, axis=0)
            centered = x - mu
            var = T.tmean(centered * centered, axis=0)
            normed = centered / T.sqrt(var + Tensor(self.eps))
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data
            self.running_var = (1 - m) * self.running_var + m * var.data
            return normed * self.scale + self.shift
        if mode == "eval":
            denom = Tensor(np.sqrt(self.running_var + self.eps))
            return (x - Tensor(self.running_mean)) / denom * self.scale + self.shift
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")


def batchnorm_forward(bn: BatchNorm, x: Tensor, mode: str) -> Tensor:
    return bn.forward(x, mode)


def dropout(x: Tensor, rate: float, mode: str, rng) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate) at train time; eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval":
        return x
    if mode != "train":
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    keep = rng.random(x.shape) >= rate
    return x * Tensor(keep / (1.0 - rate))


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping spatial max pooling; only 2x2 windows are supported."""
    if window != 2:
        raise ConfigError(f"maxpool window must be 2, got {window}")
    return T.maxpool2x2(x)


@dataclass
class ConvBackbone:
    """A VGG-flavoured stack: per stage one 3x3 same-padded conv + relu + 2x2 max pool.

    An input of extent S comes out as S / 2^stages x same x last-width.
    """

    kernels: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    widths: tuple = ()

    @classmethod
    def init(cls, in_channels: int, widths, rng) -> "ConvBackbone":
        widths = tuple(int(w) for w in widths)
        if not widths or any(w < 1 for w in widths):
            raise ConfigError(f"backbone widths must be positive, got {widths}")
        kernels, biases = [], []
        cin = in_channels
        for w in widths:
            kernels.append(T.parameter(_uniform(rng, (3, 3, cin, w), 9 * cin)))
            biases.append(T.parameter(np.zeros(w)))
            cin = w
        return cls(kernels, biases, widths)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    def out_extent(self, in_extent: int) -> int:
        if in_extent % (2 ** len(self.widths)):
            raise ConfigError(f"input extent {in_extent} not divisible by {2 ** len(self.widths)}")
        return in_extent >> len(self.widths)

    def parameters(self):
        out = []
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out += [(f"stage{i}.kernels", k), (f"stage{i}.bias", b)]
        return out

    def forward(self, x: Tensor) -> Tensor:
        for k, b in zip(self.kernels, self.biases):
            x = T.relu(T.conv2d(x, k, b, padding="same", stride=1))
            x = T.maxpool2x2(x)
        return x
