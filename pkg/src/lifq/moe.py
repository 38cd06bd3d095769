"""Sparse mixture-of-experts head with top-k routing and a learned bypass.

The head sits after the decoder: an affine gate scores every token against
every expert, only the top-k experts per token are kept (the rest are masked
to -inf before the routing softmax), and each token's output is the sparse
convex combination of its selected experts. A learnable scalar scales a
residual path around the whole block, and a linear layer plus token averaging
turns the result into one scalar quality score.

Masks are treated as constants during backpropagation: gradients flow through
the softmax over kept logits and through the expert bodies, never through the
selection itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import LinearParams, linear
from .errors import ConfigError
from .tensor import (
    Parameter,
    Tensor,
    gather_rows,
    mask_fill,
    matmul,
    relu,
    scatter_rows,
    slice_cols,
    softmax_lastdim,
    topk_indices,
)


@dataclass
class MoEConfig:
    num_experts: int = 4
    top_k: int = 2
    expert_hidden: int = 1536
    embed_dim: int = 384

    def __post_init__(self):
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(
                f"top_k {self.top_k} outside [1, {self.num_experts}]")


@dataclass
class GateParams:
    weight: Parameter  # [embed_dim, num_experts]
    bias: Parameter  # [num_experts]

    @staticmethod
    def create(name: str, embed_dim: int, num_experts: int,
               rng: np.random.Generator) -> "GateParams":
        return GateParams(
            weight=Parameter(rng.normal(0.0, 0.02, size=(embed_dim, num_experts)),
                             f"{name}.weight"),
            bias=Parameter(np.zeros(num_experts), f"{name}.bias"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


@dataclass
class ExpertParams:
    """Per-expert two-layer MLPs; all experts share the architecture only.

    ``calls`` counts token evaluations actually dispatched to each expert,
    so a forward pass over N tokens with top-k routing adds exactly N*k.
    """

    experts: list[tuple[LinearParams, LinearParams]]
    calls: int = 0

    @staticmethod
    def create(name: str, num_experts: int, embed_dim: int, hidden: int,
               rng: np.random.Generator) -> "ExpertParams":
        experts = [
            (LinearParams.create(f"{name}.{e}.fc1", embed_dim, hidden, rng),
             LinearParams.create(f"{name}.{e}.fc2", hidden, embed_dim, rng))
            for e in range(num_experts)
        ]
        return ExpertParams(experts)

    def apply(self, expert_index: int, x: Tensor) -> Tensor:
        fc1, fc2 = self.experts[expert_index]
        self.calls += int(x.shape[0])
        return linear(relu(linear(x, fc1)), fc2)

    def reset_calls(self) -> None:
        self.calls = 0

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for fc1, fc2 in self.experts:
            out.extend(fc1.parameters())
            out.extend(fc2.parameters())
        return out


@dataclass
class RoutingRecord:
    """Everything the losses need to know about one routing decision."""

    logits: Tensor  # [tokens, experts], pre-masking
    mask: np.ndarray  # bool [tokens, experts], exactly top_k True per row
    probs: Tensor  # dense softmax of logits
    sparse_weights: Tensor  # masked softmax; zero exactly where mask is False
    top_k: int


@dataclass
class MoEHeadParams:
    config: MoEConfig
    gate: GateParams
    experts: ExpertParams
    gamma: Parameter
    score: LinearParams  # [embed_dim, 1]

    @staticmethod
    def create(config: MoEConfig, rng: np.random.Generator,
               name: str = "moe") -> "MoEHeadParams":
        return MoEHeadParams(
            config=config,
            gate=GateParams.create(f"{name}.gate", config.embed_dim,
                                   config.num_experts, rng),
            experts=ExpertParams.create(f"{name}.experts", config.num_experts,
                                        config.embed_dim, config.expert_hidden, rng),
            gamma=Parameter(np.array(1.0), f"{name}.gamma"),
            score=LinearParams.create(f"{name}.score", config.embed_dim, 1, rng),
        )

    def parameters(self) -> list[Parameter]:
        return [*self.gate.parameters(), *self.experts.parameters(),
                self.gamma, *self.score.parameters()]


# -- operations ---------------------------------------------------------------


def gate(x: Tensor, params: GateParams) -> Tensor:
    """Affine token-to-expert affinity logits."""
    return matmul(x, params.weight) + params.bias


def route(logits: Tensor, top_k: int) -> RoutingRecord:
    """Keep the top-k logits per token and renormalize them into weights.

    Dense probabilities over all experts are retained alongside the sparse
    weights because the balancing losses need both.
    """
    mask = np.zeros(logits.shape, dtype=bool)
    for row, token_logits in enumerate(logits.data):
        mask[row, topk_indices(token_logits, top_k)] = True
    kept = mask_fill(logits, mask, -np.inf)
    return RoutingRecord(
        logits=logits,
        mask=mask,
        probs=softmax_lastdim(logits),
        sparse_weights=softmax_lastdim(kept),
        top_k=top_k,
    )


def moe_forward(x: Tensor, routing: RoutingRecord,
                experts: ExpertParams) -> Tensor:
    """Weighted sum of each token's selected experts.

    Experts with zero routing weight for a token are never evaluated on it;
    the weighted reduction runs in expert-index order for determinism.
    """
    num_tokens = x.shape[0]
    combined = None
    for e in range(len(experts.experts)):
        selected = np.flatnonzero(routing.mask[:, e])
        if selected.size == 0:
            continue
        expert_out = experts.apply(e, gather_rows(x, selected))
        weights = gather_rows(slice_cols(routing.sparse_weights, e, e + 1), selected)
        contribution = scatter_rows(expert_out * weights, selected, num_tokens)
        combined = contribution if combined is None else combined + contribution
    return combined


def bypass_combine(y_moe: Tensor, x: Tensor, gamma: Parameter | Tensor) -> Tensor:
    """Residual path scaled by the learnable coefficient: y + gamma * x."""
    return y_moe + gamma * x


def score_from_tokens(y_final: Tensor, score: LinearParams) -> Tensor:
    """Per-token linear score, averaged over tokens into one scalar."""
    return linear(y_final, score).mean()


def moe_head_forward(x: Tensor, params: MoEHeadParams) -> tuple[Tensor, RoutingRecord]:
    """Gate, route, mix experts, apply the bypass, and regress the score."""
    logits = gate(x, params.gate)
    routing = route(logits, params.config.top_k)
    mixed = moe_forward(x, routing, params.experts)
    combined = bypass_combine(mixed, x, params.gamma)
    return score_from_tokens(combined, params.score), routing


# -- parameter-count arithmetic -------------------------------------------------


def expert_param_count(embed_dim: int, hidden: int) -> int:
    """Trainable parameters of one expert MLP: two weight matrices plus biases."""
    return 2 * embed_dim * hidden + hidden + embed_dim


def ffn_param_count(embed_dim: int, hidden: int) -> int:
    """Book parameter count of the decoder FFN block at the given widths."""
    return 2 * embed_dim * hidden + 2 * (hidden + embed_dim)


def gate_param_count(embed_dim: int, num_experts: int) -> int:
    return embed_dim * num_experts + num_experts


def moe_param_count(config: MoEConfig, include_gate: bool = False) -> int:
    """Total expert parameters for a configuration, optionally with the gate."""
    total = config.num_experts * expert_param_count(config.embed_dim,
                                                    config.expert_hidden)
    if include_gate:
        total += gate_param_count(config.embed_dim, config.num_experts)
    return total
