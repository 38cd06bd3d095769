"""Full quality model: decoder stack feeding the mixture-of-experts head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FeatureRecord
from .decoder import DecoderConfig, DecoderParams, StageFeatures, decoder_forward
from .moe import MoEConfig, MoEHeadParams, RoutingRecord, moe_head_forward
from .tensor import Parameter, Tensor


@dataclass
class ModelConfig:
    decoder: DecoderConfig
    moe: MoEConfig

    @staticmethod
    def full_scale() -> "ModelConfig":
        return ModelConfig(decoder=DecoderConfig(), moe=MoEConfig())

    @staticmethod
    def small() -> "ModelConfig":
        """Desk-scale preset: same topology, narrow widths."""
        return ModelConfig(
            decoder=DecoderConfig(num_layers=2, num_queries=6, embed_dim=64,
                                  num_heads=4, ffn_hidden=128),
            moe=MoEConfig(num_experts=4, top_k=2, expert_hidden=64, embed_dim=64),
        )

    @staticmethod
    def tiny() -> "ModelConfig":
        """Gradient-check scale: every pathway present, minimal widths."""
        return ModelConfig(
            decoder=DecoderConfig(num_layers=1, num_queries=3, embed_dim=8,
                                  num_heads=2, ffn_hidden=5, grid_side=2),
            moe=MoEConfig(num_experts=3, top_k=2, expert_hidden=5, embed_dim=8),
        )

    def __post_init__(self):
        if self.decoder.embed_dim != self.moe.embed_dim:
            raise ValueError(
                f"decoder embed_dim {self.decoder.embed_dim} != "
                f"moe embed_dim {self.moe.embed_dim}")

    def to_dict(self) -> dict:
        return {
            "decoder": {
                "num_layers": self.decoder.num_layers,
                "num_queries": self.decoder.num_queries,
                "embed_dim": self.decoder.embed_dim,
                "num_heads": self.decoder.num_heads,
                "ffn_hidden": self.decoder.ffn_hidden,
                "grid_side": self.decoder.grid_side,
            },
            "moe": {
                "num_experts": self.moe.num_experts,
                "top_k": self.moe.top_k,
                "expert_hidden": self.moe.expert_hidden,
            },
        }

    @staticmethod
    def from_dict(raw: dict) -> "ModelConfig":
        dec = raw.get("decoder", {})
        moe = raw.get("moe", {})
        decoder = DecoderConfig(**dec)
        return ModelConfig(
            decoder=decoder,
            moe=MoEConfig(embed_dim=decoder.embed_dim, **moe),
        )


class QualityModel:
    """Owns all parameters and runs features through decoder and head."""

    def __init__(self, config: ModelConfig, c3: int, c4: int, seed: int):
        rng = np.random.default_rng([seed, 0xD_EC0DE])
        self.config = config
        self.c3 = c3
        self.c4 = c4
        self.decoder = DecoderParams.create(config.decoder, c3, c4, rng)
        self.head = MoEHeadParams.create(config.moe, rng)

    def parameters(self) -> list[Parameter]:
        return [*self.decoder.parameters(), *self.head.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, record: FeatureRecord) -> tuple[Tensor, RoutingRecord, Tensor]:
        """Returns (score, routing record, gate logits) for one image."""
        features = StageFeatures(stage3=record.stage3, stage4=record.stage4)
        tokens = decoder_forward(features, self.decoder)
        score, routing = moe_head_forward(tokens, self.head)
        return score, routing, routing.logits

    def predict(self, record: FeatureRecord) -> float:
        return self.forward(record)[0].item()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())
