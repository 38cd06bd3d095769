"""Sparse expert routing: gating, top-k masking, balancing pressure.

Run:  python3 demos/03_moe_routing.py
"""

import numpy as np

from lifq import (
    MoEConfig,
    MoEHeadParams,
    ffn_param_count,
    load_balance_loss,
    moe_head_forward,
    moe_param_count,
    route,
    z_loss,
)
from lifq.tensor import Tensor

rng = np.random.default_rng(0)
config = MoEConfig(num_experts=4, top_k=2, expert_hidden=16, embed_dim=8)
params = MoEHeadParams.create(config, rng)

tokens = Tensor(rng.normal(size=(6, 8)))
score, record = moe_head_forward(tokens, params)
print("quality score       :", round(score.item(), 4))
print("mask (token x expert):")
print(record.mask.astype(int))
print("sparse weights row 0:", np.round(record.sparse_weights.data[0], 4),
      "sum:", record.sparse_weights.data[0].sum())
print("expert evaluations  :", params.experts.calls,
      f"(= {tokens.shape[0]} tokens x k={config.top_k})")

# The two router losses: balanced assignment keeps the first near its floor
# (exactly k under perfectly uniform statistics); the z-term grows with the
# magnitude of the gate logits.
print("load balance loss   :", round(load_balance_loss(record).item(), 4))
print("router z loss       :", round(z_loss(record.logits).item(), 4))

collapsed = route(Tensor(np.tile([9.0, 0.0, 0.0, 0.0], (6, 1))), 1)
print("collapsed-routing aux:", round(load_balance_loss(collapsed).item(), 4),
      "(pressure toward the expert count)")

# Capacity bookkeeping at reference widths.
print("\nparameters:")
print("  ffn 384->2048->384        :", f"{ffn_param_count(384, 2048):,}")
for experts in (2, 4, 8):
    total = moe_param_count(MoEConfig(num_experts=experts, top_k=1,
                                      expert_hidden=1536, embed_dim=384))
    print(f"  {experts} experts at hidden 1536 : {total:,}")
