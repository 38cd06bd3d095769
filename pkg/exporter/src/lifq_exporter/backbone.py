"""Hierarchical backbone wrapper exposing the last two stage feature maps.

Wraps the torchvision Swin family. The stage-3 map comes out at stride 16
and the stage-4 map at stride 32, both channels-last, so a 224 x 224 crop
yields 14 x 14 and 7 x 7 maps. Weights come from a local file, from the
torchvision pretrained cache (``auto``), or from a seeded random init
(``none``) for hermetic runs where no pretrained weights are reachable.
"""

from __future__ import annotations

import numpy as np
import torch
import torchvision.models as tv_models

# Published channel widths of the last two stages per variant.
VARIANTS = {
    "swin_t": (384, 768),
    "swin_s": (384, 768),
    "swin_b": (512, 1024),
}

_BUILDERS = {
    "swin_t": (tv_models.swin_t, "Swin_T_Weights"),
    "swin_s": (tv_models.swin_s, "Swin_S_Weights"),
    "swin_b": (tv_models.swin_b, "Swin_B_Weights"),
}

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

_STAGE3_INDEX = 5  # features[] prefix ending at stride 16
_STAGE4_INDEX = 7  # features[] prefix ending at stride 32


class StageBackbone:
    def __init__(self, variant: str, weights: str = "none", seed: int = 0):
        if variant not in _BUILDERS:
            raise ValueError(f"unknown backbone variant {variant!r}; "
                             f"choose from {sorted(_BUILDERS)}")
        builder, weights_enum_name = _BUILDERS[variant]
        torch.set_num_threads(1)  # fixed reduction order -> reproducible bytes
        torch.manual_seed(seed)
        if weights == "none":
            model = builder(weights=None)
        elif weights == "auto":
            enum = getattr(tv_models, weights_enum_name)
            model = builder(weights=enum.IMAGENET1K_V1)
        else:
            model = builder(weights=None)
            state = torch.load(weights, map_location="cpu", weights_only=True)
            model.load_state_dict(state)
        self.variant = variant
        self.weights = weights
        self.c3, self.c4 = VARIANTS[variant]
        self._features = model.features.eval()
        for p in self._features.parameters():
            p.requires_grad_(False)

    def extract(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Image (h, w, 3) float32 in [0, 1] -> (stage3, stage4) float32 maps."""
        normalized = (image - IMAGENET_MEAN) / IMAGENET_STD
        x = torch.from_numpy(normalized).permute(2, 0, 1).unsqueeze(0)
        stage3 = stage4 = None
        with torch.no_grad():
            for index, block in enumerate(self._features):
                x = block(x)
                if index == _STAGE3_INDEX:
                    stage3 = x[0].numpy().astype(np.float32)
                elif index == _STAGE4_INDEX:
                    stage4 = x[0].numpy().astype(np.float32)
        return stage3, stage4
