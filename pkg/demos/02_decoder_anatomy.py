"""Walk one image's features through each decoder stage.

Run:  python3 demos/02_decoder_anatomy.py
"""

import numpy as np

from lifq import (
    DecoderConfig,
    DecoderParams,
    StageFeatures,
    cross_attend,
    decoder_forward,
    gcn_refine,
    init_queries,
    layer_norm,
    partition_pool,
)

rng = np.random.default_rng(0)
config = DecoderConfig(num_layers=2, num_queries=6, embed_dim=32, num_heads=4,
                       ffn_hidden=64)
params = DecoderParams.create(config, c3=12, c4=24, rng=rng)

# Backbone stand-ins: stage3 at stride 16, stage4 at stride 32.
features = StageFeatures(stage3=rng.normal(size=(14, 14, 12)),
                         stage4=rng.normal(size=(7, 7, 24)))

# 1. Queries start from learned embeddings plus one pooled context vector,
#    so every row receives the same global shift.
tokens = init_queries(features.stage4, params.q_init, params.stage4_proj)
shift = tokens.data - params.q_init.data
print("context shift identical across rows:",
      np.allclose(shift, shift[0], atol=1e-12))

# 2. The GCN mixes tokens through learnable adjacency; near-identity at init.
refined = gcn_refine(layer_norm(tokens), params.layers[0].gcn)
print("gcn output shape:", refined.shape)

# 3. stage3 collapses to a grid_side^2 sequence before attention.
source = partition_pool(features.stage3, config.grid_side, params.stage3_proj)
print("pooled source  :", source.shape, f"({config.grid_side}x{config.grid_side} grid)")

# 4. Cross-attention is a set operation over the source rows.
attended = cross_attend(layer_norm(tokens), source, params.layers[0].attention)
perm = rng.permutation(source.shape[0])
from lifq.tensor import Tensor  # noqa: E402

attended_perm = cross_attend(layer_norm(tokens), Tensor(source.data[perm]),
                             params.layers[0].attention)
print("permutation invariant:",
      np.allclose(attended.data, attended_perm.data, atol=1e-10))

# 5. The full stack: shapes are resolution independent.
for h3, w3, h4, w4 in [(14, 14, 7, 7), (20, 11, 10, 5)]:
    out = decoder_forward(StageFeatures(rng.normal(size=(h3, w3, 12)),
                                        rng.normal(size=(h4, w4, 24))), params)
    print(f"input {h3}x{w3}/{h4}x{w4} -> tokens {out.shape}")
