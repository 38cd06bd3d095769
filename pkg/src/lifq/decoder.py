"""Query-token decoder: guided initialization, GCN refinement, cross-attention.

The decoder turns a pair of backbone feature maps into a fixed set of query
tokens. Queries start from learned embeddings shifted by a global context
vector pooled from the deepest map; each decoder layer then refines them with
a three-layer graph convolution over the tokens (learnable adjacency),
attends over a partition-pooled sequence built from the penultimate map, and
applies a position-wise feed-forward block. All three sub-blocks are
pre-normalized residual branches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Parameter,
    Tensor,
    as_tensor,
    global_average_pool,
    matmul,
    partition_mean_pool,
    relu,
    softmax_lastdim,
)

LAYER_NORM_EPS = 1e-5


@dataclass
class DecoderConfig:
    """Dimensions of the decoder stack.

    ``grid_side`` defaults to the query count, giving a pooled key/value
    sequence of ``num_queries**2`` tokens.
    """

    num_layers: int = 4
    num_queries: int = 6
    embed_dim: int = 384
    num_heads: int = 6
    ffn_hidden: int = 2048
    gcn_depth: int = 3
    grid_side: int | None = None

    def __post_init__(self):
        if self.grid_side is None:
            self.grid_side = self.num_queries
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.gcn_depth != 3:
            raise ConfigError("the refinement block is fixed at three layers")
        if self.grid_side < 1:
            raise ConfigError(f"grid_side must be >= 1, got {self.grid_side}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class StageFeatures:
    """The (stage3, stage4) feature-map pair for one image, channels last."""

    stage3: np.ndarray
    stage4: np.ndarray

    def __post_init__(self):
        if self.stage3.ndim != 3 or self.stage4.ndim != 3:
            raise ShapeError(
                f"stage maps must be h x w x c, got {self.stage3.shape} "
                f"and {self.stage4.shape}")


@dataclass
class LinearParams:
    """Affine map x -> x @ weight + bias with weight of shape [in, out]."""

    weight: Parameter
    bias: Parameter

    @staticmethod
    def create(name: str, fan_in: int, fan_out: int, rng: np.random.Generator,
               std: float = 0.02) -> "LinearParams":
        return LinearParams(
            weight=Parameter(rng.normal(0.0, std, size=(fan_in, fan_out)),
                             f"{name}.weight"),
            bias=Parameter(np.zeros(fan_out), f"{name}.bias"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


def linear(x: Tensor, params: LinearParams) -> Tensor:
    return matmul(x, params.weight) + params.bias


@dataclass
class GcnBlockParams:
    """Three-layer message passing over the query tokens.

    The adjacency matrices are unconstrained reals initialized near identity;
    no normalization is applied, letting training shape the token graph
    freely.
    """

    adjacency: list[Parameter]
    weights: list[Parameter]

    @staticmethod
    def create(name: str, num_queries: int, embed_dim: int,
               rng: np.random.Generator) -> "GcnBlockParams":
        adjacency = [
            Parameter(np.eye(num_queries) + rng.normal(0.0, 0.01, (num_queries,) * 2),
                      f"{name}.a{i + 1}")
            for i in range(3)
        ]
        weights = [
            Parameter(rng.normal(0.0, 0.02, size=(embed_dim, embed_dim)),
                      f"{name}.w{i}")
            for i in range(3)
        ]
        return GcnBlockParams(adjacency, weights)

    def parameters(self) -> list[Parameter]:
        return [*self.adjacency, *self.weights]


@dataclass
class AttentionParams:
    """Projections for multi-head attention with queries separate from keys/values."""

    query: LinearParams
    key: LinearParams
    value: LinearParams
    out: LinearParams
    num_heads: int

    @staticmethod
    def create(name: str, embed_dim: int, num_heads: int,
               rng: np.random.Generator) -> "AttentionParams":
        return AttentionParams(
            query=LinearParams.create(f"{name}.query", embed_dim, embed_dim, rng),
            key=LinearParams.create(f"{name}.key", embed_dim, embed_dim, rng),
            value=LinearParams.create(f"{name}.value", embed_dim, embed_dim, rng),
            out=LinearParams.create(f"{name}.out", embed_dim, embed_dim, rng),
            num_heads=num_heads,
        )

    def parameters(self) -> list[Parameter]:
        return [*self.query.parameters(), *self.key.parameters(),
                *self.value.parameters(), *self.out.parameters()]


@dataclass
class FfnParams:
    fc1: LinearParams
    fc2: LinearParams

    @staticmethod
    def create(name: str, embed_dim: int, hidden: int,
               rng: np.random.Generator) -> "FfnParams":
        return FfnParams(
            fc1=LinearParams.create(f"{name}.fc1", embed_dim, hidden, rng),
            fc2=LinearParams.create(f"{name}.fc2", hidden, embed_dim, rng),
        )

    def parameters(self) -> list[Parameter]:
        return [*self.fc1.parameters(), *self.fc2.parameters()]


@dataclass
class DecoderLayerParams:
    gcn: GcnBlockParams
    attention: AttentionParams
    ffn: FfnParams

    def parameters(self) -> list[Parameter]:
        return [*self.gcn.parameters(), *self.attention.parameters(),
                *self.ffn.parameters()]


@dataclass
class DecoderParams:
    config: DecoderConfig
    q_init: Parameter
    stage4_proj: LinearParams
    stage3_proj: LinearParams
    layers: list[DecoderLayerParams] = field(default_factory=list)

    @staticmethod
    def create(config: DecoderConfig, c3: int, c4: int,
               rng: np.random.Generator) -> "DecoderParams":
        q_init = Parameter(
            rng.normal(0.0, 0.02, size=(config.num_queries, config.embed_dim)),
            "q_init")
        stage4_proj = LinearParams.create("stage4_proj", c4, config.embed_dim, rng)
        stage3_proj = LinearParams.create("stage3_proj", c3, config.embed_dim, rng)
        layers = [
            DecoderLayerParams(
                gcn=GcnBlockParams.create(f"layers.{i}.gcn", config.num_queries,
                                          config.embed_dim, rng),
                attention=AttentionParams.create(f"layers.{i}.attn", config.embed_dim,
                                                 config.num_heads, rng),
                ffn=FfnParams.create(f"layers.{i}.ffn", config.embed_dim,
                                     config.ffn_hidden, rng),
            )
            for i in range(config.num_layers)
        ]
        return DecoderParams(config, q_init, stage4_proj, stage3_proj, layers)

    def parameters(self) -> list[Parameter]:
        params = [self.q_init, *self.stage4_proj.parameters(),
                  *self.stage3_proj.parameters()]
        for layer in self.layers:
            params.extend(layer.parameters())
        return params


# -- operations ---------------------------------------------------------------


def layer_norm(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-token normalization over the last axis, no learned affine."""
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * (variance + eps) ** -0.5


def init_queries(stage4: np.ndarray | Tensor, q_init: Parameter,
                 stage4_proj: LinearParams) -> Tensor:
    """Shift every learned query by the pooled global context of stage4.

    The deepest map is projected per position (a 1x1 convolution), averaged
    over space, and the resulting context vector is broadcast onto all
    queries. Projecting after pooling is used here; the two orders are
    identical because the projection is affine and pooling is a mean.
    """
    stage4 = as_tensor(stage4)
    if stage4.shape[-1] != stage4_proj.weight.shape[0]:
        raise ShapeError(
            f"stage4 channels {stage4.shape[-1]} do not match projection "
            f"input {stage4_proj.weight.shape[0]}")
    pooled = global_average_pool(stage4).reshape(1, -1)
    context = linear(pooled, stage4_proj)
    return q_init + context


def gcn_refine(queries: Tensor, params: GcnBlockParams) -> Tensor:
    """Three rounds of adjacency-weighted mixing; the last round is linear."""
    h = queries
    for i in range(3):
        h = matmul(matmul(params.adjacency[i], h), params.weights[i])
        if i < 2:
            h = relu(h)
    return h


def partition_pool(stage3: np.ndarray | Tensor, grid_side: int,
                   stage3_proj: LinearParams) -> Tensor:
    """Pool stage3 over a grid and project each cell vector to the embed dim."""
    stage3 = as_tensor(stage3)
    if stage3.shape[-1] != stage3_proj.weight.shape[0]:
        raise ShapeError(
            f"stage3 channels {stage3.shape[-1]} do not match projection "
            f"input {stage3_proj.weight.shape[0]}")
    pooled = partition_mean_pool(stage3, grid_side)
    return linear(pooled, stage3_proj)


def cross_attend(queries: Tensor, source: Tensor,
                 params: AttentionParams) -> Tensor:
    """Multi-head scaled dot-product attention of queries over a source sequence."""
    n, d = queries.shape
    m = source.shape[0]
    heads = params.num_heads
    head_dim = d // heads
    scale = 1.0 / np.sqrt(head_dim)

    def split_heads(x: Tensor, rows: int) -> Tensor:
        return x.reshape(rows, heads, head_dim).transpose((1, 0, 2))

    q = split_heads(linear(queries, params.query), n)
    k = split_heads(linear(source, params.key), m)
    v = split_heads(linear(source, params.value), m)

    logits = matmul(q, k.transpose((0, 2, 1))) * scale
    attention = softmax_lastdim(logits)
    mixed = matmul(attention, v)
    merged = mixed.transpose((1, 0, 2)).reshape(n, d)
    return linear(merged, params.out)


def ffn(x: Tensor, params: FfnParams) -> Tensor:
    """Two per-token affine maps with a ReLU between them."""
    return linear(relu(linear(x, params.fc1)), params.fc2)


def decoder_forward(features: StageFeatures, params: DecoderParams) -> Tensor:
    """Run the full decoder stack and return the refined query tokens.

    The pooled stage3 sequence is computed once and shared by every layer;
    each layer applies its own GCN, cross-attention and FFN branches with
    pre-norm residuals.
    """
    config = params.config
    if features.stage3.shape[0] < config.grid_side \
            or features.stage3.shape[1] < config.grid_side:
        raise ConfigError(
            f"stage3 extent {features.stage3.shape[:2]} smaller than "
            f"grid {config.grid_side}")
    tokens = init_queries(features.stage4, params.q_init, params.stage4_proj)
    source = partition_pool(features.stage3, config.grid_side, params.stage3_proj)
    for layer in params.layers:
        tokens = tokens + gcn_refine(layer_norm(tokens), layer.gcn)
        tokens = tokens + cross_attend(layer_norm(tokens), source, layer.attention)
        tokens = tokens + ffn(layer_norm(tokens), layer.ffn)
    return tokens
