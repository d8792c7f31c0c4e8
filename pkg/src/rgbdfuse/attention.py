"""Two-level attention over a fused feature volume.

Level one gates whole feature maps: each map is flattened to a vector, the
resulting sequence is encoded by an LSTM stack (or scored directly by a shared
dense layer), and a per-map score squashed to (0, 1) scales that map. Level
two gates spatial positions: channel-wise average and max maps are stacked and
reduced to a single map by a 1x1 convolution (or a dense layer), squashed, and
broadcast over channels.

Both modules accept a single volume [M x M x C] or a batch [B x M x M x C];
weights come back per sample in the batched case.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import DenseLayer, LstmLayer, blstm_forward, dense_forward, lstm_forward
from .tensor import Tensor

FM_VARIANTS = ("lstm_dense", "dense_only")
SPATIAL_VARIANTS = ("conv", "dense")


def reshape_to_map_sequence(f: Tensor) -> Tensor:
    """Turn [M x M x C] into a C-step sequence of row-major flattened maps [C x M^2].

    A batched volume [B x M x M x C] becomes [C x B x M^2] (time-major).
    """
    if f.ndim == 3:
        m, m2, c = f.shape
        if m != m2:
            raise ShapeError(f"expected a square volume, got {f.shape}")
        return T.transpose(T.reshape(f, (m * m, c)), (1, 0))
    if f.ndim == 4:
        b, m, m2, c = f.shape
        if m != m2:
            raise ShapeError(f"expected square volumes, got {f.shape}")
        return T.transpose(T.reshape(f, (b, m * m, c)), (2, 0, 1))
    raise ShapeError(f"expected rank 3 or 4, got {f.shape}")


@dataclass
class FeatureMapAttention:
    """Per-feature-map gating weights in (0, 1) and the gated volume."""

    variant: str
    channels: int
    map_extent: int
    score: DenseLayer
    lstm_stack: list = field(default_factory=list)
    blstm_bwd: LstmLayer | None = None
    activation: str = "sigmoid"
    transposed: bool = False
    bypass: bool = False

    @classmethod
    def init(
        cls,
        channels: int,
        map_extent: int,
        rng,
        variant: str = "lstm_dense",
        hidden: int = 64,
        n_layers: int = 1,
        blstm: bool = False,
        activation: str = "sigmoid",
        transposed: bool = False,
    ) -> "FeatureMapAttention":
        if variant not in FM_VARIANTS:
            raise ConfigError(f"feature-map attention variant must be one of {FM_VARIANTS}, got {variant!r}")
        if not 1 <= n_layers <= 3:
            raise ConfigError(f"lstm stack depth must be 1..3, got {n_layers}")
        if blstm and n_layers != 1:
            raise ConfigError("the bidirectional variant uses exactly one layer")
        m2 = map_extent * map_extent
        stack: list[LstmLayer] = []
        bwd = None
        if variant == "dense_only":
            score = DenseLayer.init(m2, 1, rng)
        elif transposed:
            # alternative orientation: M^2 steps of width C; the final hidden
            # state is mapped to one score per channel
            stack = [LstmLayer.init(channels if i == 0 else hidden, hidden, rng) for i in range(n_layers)]
            score = DenseLayer.init(hidden, channels, rng)
        else:
            stack = [LstmLayer.init(m2 if i == 0 else hidden, hidden, rng) for i in range(n_layers)]
            if blstm:
                bwd = LstmLayer.init(m2, hidden, rng)
                score = DenseLayer.init(2 * hidden, 1, rng)
            else:
                score = DenseLayer.init(hidden, 1, rng)
        return cls(variant, channels, map_extent, score, stack, bwd, activation, transposed)

    def parameters(self):
        out = []
        for i, layer in enumerate(self.lstm_stack):
            out += [(f"lstm{i}.{n}", p) for n, p in layer.parameters()]
        if self.blstm_bwd is not None:
            out += [(f"blstm_bwd.{n}", p) for n, p in self.blstm_bwd.parameters()]
        out += [(f"score.{n}", p) for n, p in self.score.parameters()]
        return out

    def _scores(self, f4: Tensor) -> Tensor:
        b, m, _, c = f4.shape
        if self.variant == "dense_only":
            seq = reshape_to_map_sequence(f4)  # [C, B, M^2]
            flat = T.reshape(seq, (c * b, m * m))
            theta = dense_forward(self.score, flat)
            return T.transpose(T.reshape(theta, (c, b)), (1, 0))
        if self.transposed:
            seq = T.transpose(T.reshape(f4, (b, m * m, c)), (1, 0, 2))  # [M^2, B, C]
            hs = seq
            for layer in self.lstm_stack:
                hs = lstm_forward(layer, hs)
            last = T.index_axis0(hs, m * m - 1)  # [B, H]
            return dense_forward(self.score, last)
        seq = reshape_to_map_sequence(f4)  # [C, B, M^2]
        hs = seq
        if self.blstm_bwd is not None:
            hs = blstm_forward(self.lstm_stack[0], self.blstm_bwd, hs)
        else:
            for layer in self.lstm_stack:
                hs = lstm_forward(layer, hs)
        width = hs.shape[-1]
        theta = dense_forward(self.score, T.reshape(hs, (c * b, width)))
        return T.transpose(T.reshape(theta, (c, b)), (1, 0))


def feature_map_attention(att: FeatureMapAttention, f: Tensor):
    """Return (weights, refined): W in (0,1) per map and W * f."""
    squeeze = f.ndim == 3
    f4 = T.reshape(f, (1,) + f.shape) if squeeze else f
    if f4.ndim != 4:
        raise ShapeError(f"expected a feature volume, got {f.shape}")
    b, m, m2, c = f4.shape
    if m != m2 or m != att.map_extent:
        raise ConfigError(f"attention configured for {att.map_extent}x{att.map_extent} maps, got {f.shape}")
    if c != att.channels:
        raise ConfigError(f"attention configured for {att.channels} channels, got {c}")
    if att.bypass:
        weights = Tensor(np.ones((b, c)))
    else:
        weights = T.activation(att._scores(f4), att.activation)
    refined = T.broadcast_mul_channel(f4, weights)
    if squeeze:
        return T.reshape(weights, (c,)), T.reshape(refined, f.shape)
    return weights, refined


@dataclass
class SpatialAttention:
    """Per-position gating weights in (0, 1) and the gated volume."""

    variant: str
    map_extent: int
    kernels: Tensor | None = None
    bias: Tensor | None = None
    dense: DenseLayer | None = None
    bypass: bool = False

    @classmethod
    def init(cls, map_extent: int, rng, variant: str = "conv") -> "SpatialAttention":
        if variant not in SPATIAL_VARIANTS:
            raise ConfigError(f"spatial attention variant must be one of {SPATIAL_VARIANTS}, got {variant!r}")
        if variant == "conv":
            bound = 1.0 / np.sqrt(2.0)
            kernels = T.parameter(rng.uniform(-bound, bound, size=(1, 1, 2, 1)))
            return cls(variant, map_extent, kernels, T.parameter(np.zeros(1)))
        m2 = map_extent * map_extent
        return cls(variant, map_extent, dense=DenseLayer.init(2 * m2, m2, rng))

    def parameters(self):
        if self.variant == "conv":
            return [("conv.kernels", self.kernels), ("conv.bias", self.bias)]
        return [(f"dense.{n}", p) for n, p in self.dense.parameters()]


def spatial_attention(att: SpatialAttention, f: Tensor):
    """Return (weights, refined): W in (0,1) per position and W * f."""
    squeeze = f.ndim == 3
    f4 = T.reshape(f, (1,) + f.shape) if squeeze else f
    if f4.ndim != 4:
        raise ShapeError(f"expected a feature volume, got {f.shape}")
    b, m, m2, _ = f4.shape
    if m != m2 or m != att.map_extent:
        raise ConfigError(f"spatial attention configured for {att.map_extent}x{att.map_extent}, got {f.shape}")
    if att.bypass:
        weights = Tensor(np.ones((b, m, m)))
    else:
        pooled = T.channel_concat(T.channel_pool(f4, "avg"), T.channel_pool(f4, "max"))  # [B,M,M,2]
        if att.variant == "conv":
            theta = T.conv2d(pooled, att.kernels, att.bias, padding="valid", stride=1)
            weights = T.reshape(T.sigmoid(theta), (b, m, m))
        else:
            flat = T.reshape(pooled, (b, 2 * m * m))
            weights = T.sigmoid(T.reshape(dense_forward(att.dense, flat), (b, m, m)))
    refined = T.broadcast_mul_spatial(f4, weights)
    if squeeze:
        return T.reshape(weights, (m, m)), T.reshape(refined, f.shape)
    return weights, refined


class TwoLevelResult(NamedTuple):
    refined: Tensor
    fm_weights: Tensor
    spatial_weights: Tensor
    fm_refined: Tensor


def two_level_attention(fm: FeatureMapAttention, sp: SpatialAttention, f_concat: Tensor) -> TwoLevelResult:
    """Feature-map gating followed by spatial gating; both weight tensors kept."""
    fm_weights, fm_refined = feature_map_attention(fm, f_concat)
    sp_weights, refined = spatial_attention(sp, fm_refined)
    return TwoLevelResult(refined, fm_weights, sp_weights, fm_refined)


def write_weights_csv(stream, sample_ids, weights: Tensor) -> None:
    """Dump one batch of attention weights as rows of sample_id,weight_index,value."""
    w = weights.data
    if w.ndim == 1:
        w = w[None]
    flat = w.reshape(w.shape[0], -1)
    if len(sample_ids) != flat.shape[0]:
        raise ShapeError(f"{len(sample_ids)} sample ids for {flat.shape[0]} weight rows")
    for sid, row in zip(sample_ids, flat):
        for idx, value in enumerate(row):
            stream.write(f"{sid},{idx},{value:.17g}\n")
