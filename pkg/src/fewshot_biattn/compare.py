"""Learnable and fixed comparators mapping (query, class) embedding pairs
to an M x N score matrix.

Three interchangeable comparators:

* ``biattn``   -- multi-head bi-attention: per pair, the reshaped query
  attends over the positions of the reshaped class embedding
  (softmax(Q C^T / sqrt(d_z)) C per head), heads are concatenated and
  re-projected, and a two-layer head (sigmoid bottleneck, then an inner
  product over positions) emits one scalar score.
* ``relation`` -- a small CNN on channel-concatenated feature-map pairs
  with a sigmoid output, the classic learned-CNN metric baseline.
* ``proto``    -- fixed metric: negative squared distance to the class
  prototype (class embedding divided by the shot count).

Scores at row j, column n always rate query j against class n; every
comparator is a pure function of the embeddings and its parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig, pair_and_reshape, pair_feature_maps, _paired_rows
from .rng import PortableRng
from .tensor import (Tensor, ShapeError, add, concat, conv2d, matmul, maxpool2d, mul,
                     neg, parameter, reduce_sum, relu, reshape, sigmoid, softmax, sub,
                     transpose, constant)


@dataclass
class ScoreMatrix:
    """M x N comparison scores; row r = j * N + n of the paired layout maps
    to entry (j, n)."""

    scores: Tensor
    pair_index: np.ndarray

    @property
    def data(self) -> np.ndarray:
        return self.scores.data


def _kaiming_uniform(rng: PortableRng, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.fill_uniform_signed(shape, np.sqrt(6.0 / fan_in))


# ---------------------------------------------------------------------------
# bi-attention comparator


@dataclass
class BiAttentionParams:
    """Weights of the bi-attention comparator.

    ``heads`` attention heads of per-head width head_dim = hidden_size /
    heads (query and class projections share that width); the attention
    scale factor equals head_dim.  ``seq_len`` is the position count of the
    reshaped embeddings, which fixes the final projection W2.
    """

    heads: int
    hidden_size: int
    seq_len: int
    tensors: dict[str, Tensor]

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.heads

    @property
    def scale(self) -> float:
        return float(self.head_dim)

    @staticmethod
    def init(heads: int, hidden_size: int, seq_len: int, rng: PortableRng
             ) -> "BiAttentionParams":
        if heads < 1 or hidden_size % heads != 0:
            raise ValueError(f"hidden size {hidden_size} must be a positive "
                             f"multiple of head count {heads}")
        dq = hidden_size // heads
        t: dict[str, Tensor] = {}
        for i in range(heads):
            t[f"biattn/head{i}/Wq"] = parameter(
                _kaiming_uniform(rng, (hidden_size, dq), fan_in=hidden_size))
            t[f"biattn/head{i}/Wc"] = parameter(
                _kaiming_uniform(rng, (hidden_size, dq), fan_in=hidden_size))
        t["biattn/Wo"] = parameter(
            _kaiming_uniform(rng, (heads * dq, hidden_size), fan_in=heads * dq))
        t["biattn/W1"] = parameter(_kaiming_uniform(rng, (hidden_size, 1), fan_in=hidden_size))
        t["biattn/b1"] = parameter(np.zeros(()))
        t["biattn/W2"] = parameter(_kaiming_uniform(rng, (seq_len, 1), fan_in=seq_len))
        t["biattn/b2"] = parameter(np.zeros(()))
        return BiAttentionParams(heads, hidden_size, seq_len, t)

    @staticmethod
    def from_tensors(heads: int, hidden_size: int, tensors: dict[str, Tensor]
                     ) -> "BiAttentionParams":
        seq_len = tensors["biattn/W2"].shape[0]
        return BiAttentionParams(heads, hidden_size, seq_len, tensors)


def bi_attention(query_rows: Tensor, class_rows: Tensor, scale: float) -> Tensor:
    """Scaled bi-attention per pair row.

    For each row, A = softmax(Q C^T / sqrt(scale)) over the class-position
    axis (so A is row-stochastic), and the output is A C.  Shapes:
    (rows, L, d) x (rows, L, d) -> (rows, L, d).
    """
    if scale <= 0:
        raise ValueError(f"attention scale must be positive, got {scale}")
    if query_rows.ndim != 3 or class_rows.ndim != 3 \
            or query_rows.shape[0] != class_rows.shape[0] \
            or query_rows.shape[2] != class_rows.shape[2]:
        raise ShapeError(f"bi_attention: incompatible shapes "
                         f"{query_rows.shape} and {class_rows.shape}")
    logits = mul(matmul(query_rows, transpose(class_rows, (0, 2, 1))),
                 constant(1.0 / np.sqrt(scale)))
    attn = softmax(logits, axis=2)
    return matmul(attn, class_rows)


def multi_head(query_rows: Tensor, class_rows: Tensor,
               params: BiAttentionParams) -> Tensor:
    """Multi-head bi-attention with output projection.

    head_i = bi_attention(Q Wq_i, C Wc_i); the heads are concatenated along
    the feature axis and projected by Wo back to hidden_size.
    """
    heads = []
    for i in range(params.heads):
        q_i = matmul(query_rows, params.tensors[f"biattn/head{i}/Wq"])
        c_i = matmul(class_rows, params.tensors[f"biattn/head{i}/Wc"])
        heads.append(bi_attention(q_i, c_i, params.scale))
    stacked = concat(heads, axis=2) if len(heads) > 1 else heads[0]
    return matmul(stacked, params.tensors["biattn/Wo"])


def score_head(h: Tensor, params: BiAttentionParams) -> Tensor:
    """Two-layer summary of the attended features into one score per row.

    u = sigmoid(H W1 + b1) collapses the feature axis; the score is the
    inner product u . W2 + b2 over the position axis.
    """
    if h.shape[1] != params.seq_len:
        raise ShapeError(f"score head built for {params.seq_len} positions, "
                         f"input has {h.shape[1]}")
    u = sigmoid(add(matmul(h, params.tensors["biattn/W1"]), params.tensors["biattn/b1"]))
    s = add(matmul(transpose(u, (0, 2, 1)), params.tensors["biattn/W2"]),
            params.tensors["biattn/b2"])
    return reshape(s, (h.shape[0],))


def compare(query_emb: Tensor, class_emb: Tensor,
            params: BiAttentionParams) -> ScoreMatrix:
    """Full bi-attention comparison of M queries against N classes."""
    q_rows, c_rows, pair_index = pair_and_reshape(class_emb, query_emb,
                                                  params.hidden_size)
    scores = score_head(multi_head(q_rows, c_rows, params), params)
    m, n = query_emb.shape[0], class_emb.shape[0]
    return ScoreMatrix(reshape(scores, (m, n)), pair_index)


# ---------------------------------------------------------------------------
# relation-CNN baseline


def init_relation_params(feature_channels: int, feature_size: int, rng: PortableRng,
                         conv_channels: int = 64, hidden: int = 64
                         ) -> dict[str, Tensor]:
    l = feature_channels
    d = feature_size
    _check_relation_spatial(d)
    t: dict[str, Tensor] = {}
    t["relation/conv0/kernel"] = parameter(
        _kaiming_uniform(rng, (conv_channels, 2 * l, 3, 3), fan_in=2 * l * 9))
    t["relation/conv0/bias"] = parameter(np.zeros((conv_channels, 1, 1)))
    t["relation/conv1/kernel"] = parameter(
        _kaiming_uniform(rng, (conv_channels, conv_channels, 3, 3), fan_in=conv_channels * 9))
    t["relation/conv1/bias"] = parameter(np.zeros((conv_channels, 1, 1)))
    flat = conv_channels * (d // 4) ** 2
    t["relation/fc0/weight"] = parameter(_kaiming_uniform(rng, (flat, hidden), fan_in=flat))
    t["relation/fc0/bias"] = parameter(np.zeros((hidden,)))
    t["relation/fc1/weight"] = parameter(_kaiming_uniform(rng, (hidden, 1), fan_in=hidden))
    t["relation/fc1/bias"] = parameter(np.zeros((1,)))
    return t


def _check_relation_spatial(d: int) -> None:
    if d < 4 or d % 4 != 0:
        raise ShapeError(f"relation comparator needs feature maps with spatial "
                         f"size >= 4 and divisible by 4 for its two pools, got d={d}")


def relation_cnn_score(query_emb: Tensor, class_emb: Tensor,
                       params: dict[str, Tensor]) -> ScoreMatrix:
    """CNN metric on channel-concatenated (query, class) feature maps.

    Per pair: concat along channels -> two conv+relu+pool blocks -> two
    linear layers -> sigmoid, giving a score in (0, 1).
    """
    d = class_emb.shape[-1]
    _check_relation_spatial(d)
    q_maps, c_maps, pair_index = pair_feature_maps(class_emb, query_emb)
    x = concat([q_maps, c_maps], axis=1)
    for i in range(2):
        x = conv2d(x, params[f"relation/conv{i}/kernel"])
        x = maxpool2d(relu(add(x, params[f"relation/conv{i}/bias"])))
    rows = x.shape[0]
    flat = reshape(x, (rows, int(np.prod(x.shape[1:]))))
    y = relu(add(matmul(flat, params["relation/fc0/weight"]), params["relation/fc0/bias"]))
    s = sigmoid(add(matmul(y, params["relation/fc1/weight"]), params["relation/fc1/bias"]))
    m, n = query_emb.shape[0], class_emb.shape[0]
    return ScoreMatrix(reshape(s, (m, n)), pair_index)


# ---------------------------------------------------------------------------
# prototypical-distance reference


def proto_distance_score(query_emb: Tensor, class_emb: Tensor,
                         k_shot: int) -> ScoreMatrix:
    """Fixed metric: negative squared distance to the class prototype.

    The prototype is the mean support embedding, i.e. the class embedding
    (a sum over K shots) divided by K.
    """
    q_rows, c_rows, pair_index = _paired_rows(class_emb, query_emb)
    delta = sub(q_rows, mul(c_rows, constant(1.0 / k_shot)))
    dist = reduce_sum(mul(delta, delta), axis=1)
    m, n = query_emb.shape[0], class_emb.shape[0]
    return ScoreMatrix(reshape(neg(dist), (m, n)), pair_index)


# ---------------------------------------------------------------------------
# uniform comparator interface for the trainer


class Comparator:
    """Interface: parameter init keyed for checkpoints, plus scoring."""

    name: str

    def init_params(self, config: BackboneConfig, rng: PortableRng) -> dict[str, Tensor]:
        raise NotImplementedError

    def score(self, query_emb: Tensor, class_emb: Tensor,
              params: dict[str, Tensor], k_shot: int) -> ScoreMatrix:
        raise NotImplementedError


class BiAttentionComparator(Comparator):
    name = "biattn"

    def __init__(self, heads: int = 8, hidden_size: int = 128):
        self.heads = heads
        self.hidden_size = hidden_size

    def init_params(self, config, rng):
        feat = config.feature_dim
        if feat % self.hidden_size != 0:
            raise ShapeError(f"backbone features l*d^2 = {feat} not divisible by "
                             f"hidden size {self.hidden_size}")
        seq_len = feat // self.hidden_size
        return BiAttentionParams.init(self.heads, self.hidden_size, seq_len, rng).tensors

    def score(self, query_emb, class_emb, params, k_shot):
        p = BiAttentionParams.from_tensors(self.heads, self.hidden_size, params)
        return compare(query_emb, class_emb, p)


class RelationCnnComparator(Comparator):
    name = "relation"

    def __init__(self, conv_channels: int = 64, hidden: int = 64):
        self.conv_channels = conv_channels
        self.hidden = hidden

    def init_params(self, config, rng):
        return init_relation_params(config.feature_channels, config.feature_size,
                                    rng, self.conv_channels, self.hidden)

    def score(self, query_emb, class_emb, params, k_shot):
        return relation_cnn_score(query_emb, class_emb, params)


class ProtoComparator(Comparator):
    name = "proto"

    def init_params(self, config, rng):
        return {}

    def score(self, query_emb, class_emb, params, k_shot):
        return proto_distance_score(query_emb, class_emb, k_shot)


def make_comparator(name: str, heads: int = 8, hidden_size: int = 128,
                    relation_channels: int = 64, relation_hidden: int = 64) -> Comparator:
    if name == "biattn":
        return BiAttentionComparator(heads, hidden_size)
    if name == "relation":
        return RelationCnnComparator(relation_channels, relation_hidden)
    if name == "proto":
        return ProtoComparator()
    raise ValueError(f"unknown comparator {name!r}")
