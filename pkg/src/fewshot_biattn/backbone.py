"""Convolutional feature extractor and class-embedding construction.

Two variants share a four-block layout with a 2x2 max-pool closing each
block, so a (c, s, s) image maps to (l, s/16, s/16) features:

* ``tiny``      -- one 3x3 conv + per-channel affine + relu per block.
* ``resnet12``  -- three 3x3 conv layers per block with a shortcut
  (identity, or a 1x1 projection when the channel count changes).

Per-channel learnable affines (scale, shift) stand in for normalization
layers, keeping forward passes deterministic and gradients checkable.

Class embeddings are the elementwise *sum* of the K support embeddings of
a class; the summation accumulates in value-sorted order so reordering
the shots cannot change a single bit of the result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import PortableRng
from .tensor import (Tensor, ShapeError, add, concat, conv2d, matmul, maxpool2d, mul,
                     parameter, relu, reshape, sorted_axis_sum, transpose)

_DEFAULT_CHANNELS = {"tiny": (16, 32, 64, 64), "resnet12": (64, 128, 256, 512)}


@dataclass(frozen=True)
class BackboneConfig:
    variant: str
    input_size: int
    in_channels: int = 1
    stage_channels: tuple[int, int, int, int] = ()

    def __post_init__(self):
        if self.variant not in _DEFAULT_CHANNELS:
            raise ValueError(f"unknown backbone variant {self.variant!r}")
        if self.input_size % 16 != 0 or self.input_size <= 0:
            raise ValueError(f"input size must be a positive multiple of 16, "
                             f"got {self.input_size}")
        channels = self.stage_channels or _DEFAULT_CHANNELS[self.variant]
        if len(channels) != 4 or any(c < 1 for c in channels):
            raise ValueError(f"stage_channels must be 4 positive counts, got {channels}")
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in channels))

    @property
    def feature_channels(self) -> int:
        """l: channel count of the embedding."""
        return self.stage_channels[-1]

    @property
    def feature_size(self) -> int:
        """d: spatial size of the embedding (input / 16 after four pools)."""
        return self.input_size // 16

    @property
    def feature_dim(self) -> int:
        """Flattened embedding length l * d^2."""
        return self.feature_channels * self.feature_size ** 2


def _kaiming_uniform(rng: PortableRng, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.fill_uniform_signed(shape, np.sqrt(6.0 / fan_in))


def init_backbone(config: BackboneConfig, rng: PortableRng) -> dict[str, Tensor]:
    """Learnable weights keyed by checkpoint name, in deterministic order."""
    params: dict[str, Tensor] = {}
    convs_per_block = 3 if config.variant == "resnet12" else 1
    c_in = config.in_channels
    for b, c_out in enumerate(config.stage_channels):
        ci = c_in
        for j in range(convs_per_block):
            prefix = f"backbone/block{b}/conv{j}"
            params[f"{prefix}/kernel"] = parameter(
                _kaiming_uniform(rng, (c_out, ci, 3, 3), fan_in=ci * 9))
            params[f"{prefix}/scale"] = parameter(np.ones((c_out, 1, 1)))
            params[f"{prefix}/shift"] = parameter(np.zeros((c_out, 1, 1)))
            ci = c_out
        if config.variant == "resnet12" and c_in != c_out:
            prefix = f"backbone/block{b}/shortcut"
            params[f"{prefix}/weight"] = parameter(
                _kaiming_uniform(rng, (c_in, c_out), fan_in=c_in))
            params[f"{prefix}/scale"] = parameter(np.ones((c_out, 1, 1)))
            params[f"{prefix}/shift"] = parameter(np.zeros((c_out, 1, 1)))
        c_in = c_out
    return params


def _affine(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return add(mul(x, params[f"{prefix}/scale"]), params[f"{prefix}/shift"])


def _project_channels(x: Tensor, weight: Tensor) -> Tensor:
    """1x1 convolution as a matmul over the channel axis."""
    b, c, h, w = x.shape
    flat = reshape(transpose(x, (0, 2, 3, 1)), (b * h * w, c))
    out = matmul(flat, weight)
    return transpose(reshape(out, (b, h, w, weight.shape[1])), (0, 3, 1, 2))


def _tiny_block(x: Tensor, params: dict[str, Tensor], block: int) -> Tensor:
    prefix = f"backbone/block{block}/conv0"
    y = relu(_affine(conv2d(x, params[f"{prefix}/kernel"]), params, prefix))
    return maxpool2d(y)


def _residual_block(x: Tensor, params: dict[str, Tensor], block: int) -> Tensor:
    y = x
    for j in range(3):
        prefix = f"backbone/block{block}/conv{j}"
        y = _affine(conv2d(y, params[f"{prefix}/kernel"]), params, prefix)
        if j < 2:
            y = relu(y)
    sc_key = f"backbone/block{block}/shortcut/weight"
    if sc_key in params:
        shortcut = _affine(_project_channels(x, params[sc_key]), params,
                           f"backbone/block{block}/shortcut")
    else:
        shortcut = x
    return maxpool2d(relu(add(y, shortcut)))


def embed_batch(config: BackboneConfig, params: dict[str, Tensor],
                images: Tensor) -> Tensor:
    """Map a (batch, c, s, s) image tensor to (batch, l, d, d) features."""
    b, c, h, w = images.shape
    if c != config.in_channels or h != config.input_size or w != config.input_size:
        raise ShapeError(
            f"images are {c}x{h}x{w}, backbone expects "
            f"{config.in_channels}x{config.input_size}x{config.input_size}")
    x = images
    block = _residual_block if config.variant == "resnet12" else _tiny_block
    for i in range(4):
        x = block(x, params, i)
    return x


def class_embeddings(support_embeddings: Tensor) -> Tensor:
    """Per-class elementwise sum over the K shots: (N, K, l, d, d) -> (N, l, d, d)."""
    if support_embeddings.ndim != 5:
        raise ShapeError(f"expected (N, K, l, d, d), got {support_embeddings.shape}")
    return sorted_axis_sum(support_embeddings, axis=1)


def _paired_rows(class_emb: Tensor, query_emb: Tensor) -> tuple[Tensor, Tensor, np.ndarray]:
    """Flatten and pair every query with every class.

    Row r of the output corresponds to pair (j, n) with r = j * N + n:
    queries are repeated N times each (consecutive rows), classes are tiled
    M times.  Returns (query_rows, class_rows, pair_index).
    """
    n = class_emb.shape[0]
    m = query_emb.shape[0]
    feat = int(np.prod(class_emb.shape[1:]))
    if int(np.prod(query_emb.shape[1:])) != feat:
        raise ShapeError(f"class features {class_emb.shape} and query features "
                         f"{query_emb.shape} disagree")
    q_flat = reshape(query_emb, (m, feat))
    c_flat = reshape(class_emb, (n, feat))
    if n > 1:
        stacked = concat([q_flat] * n, axis=0)  # row t*M + j holds query j
        q_rows = reshape(transpose(reshape(stacked, (n, m, feat)), (1, 0, 2)), (m * n, feat))
    else:
        q_rows = q_flat
    c_rows = concat([c_flat] * m, axis=0) if m > 1 else c_flat
    pair_index = np.array([(j, i) for j in range(m) for i in range(n)], dtype=np.int64)
    return q_rows, c_rows, pair_index


def pair_feature_maps(class_emb: Tensor, query_emb: Tensor
                      ) -> tuple[Tensor, Tensor, np.ndarray]:
    """Pair queries with classes keeping map shape: two (M*N, l, d, d) tensors."""
    q_rows, c_rows, pair_index = _paired_rows(class_emb, query_emb)
    map_shape = (q_rows.shape[0],) + tuple(class_emb.shape[1:])
    return reshape(q_rows, map_shape), reshape(c_rows, map_shape), pair_index


def pair_and_reshape(class_emb: Tensor, query_emb: Tensor, hidden_size: int
                     ) -> tuple[Tensor, Tensor, np.ndarray]:
    """Pair and reshape embeddings into attention operands.

    Each l*d^2 feature vector is viewed row-major as (seq_len, hidden_size)
    with seq_len = l*d^2 / hidden_size.  Returns (query_rows, class_rows,
    pair_index) where both tensors are (M*N, seq_len, hidden_size) and row
    r = j * N + n pairs query j with class n.
    """
    feat = int(np.prod(class_emb.shape[1:]))
    if feat % hidden_size != 0:
        l = class_emb.shape[1]
        d = class_emb.shape[-1]
        raise ShapeError(f"l*d^2 = {l}*{d}^2 = {feat} is not divisible by "
                         f"hidden size {hidden_size}")
    seq_len = feat // hidden_size
    q_rows, c_rows, pair_index = _paired_rows(class_emb, query_emb)
    rows = q_rows.shape[0]
    shape = (rows, seq_len, hidden_size)
    return reshape(q_rows, shape), reshape(c_rows, shape), pair_index
