"""Omnivorous masked autoencoding at desk scale.

One ViT encoder is pretrained on both images and videos by reconstructing
heavily masked spatio-temporal patches. Everything runs on numpy with a
small reverse-mode tape.
"""

from .masking import Mask, MaskSpec, generate_mask
from .model import OmniMaeConfig, PRESETS, forward, init_params, preset
from .patchify import IMAGE, VIDEO, PatchConfig, VisualTensor, patchify, unpatchify

__version__ = "0.1.0"

__all__ = [
    "IMAGE", "VIDEO", "Mask", "MaskSpec", "OmniMaeConfig", "PRESETS", "PatchConfig", "VisualTensor",
    "forward", "generate_mask", "init_params", "patchify", "preset", "unpatchify",
]
