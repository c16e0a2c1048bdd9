"""Fixed, parameter-free bridge between encoder and decoder: identity for the
base model, central-half instance crop for class-specific models."""
from __future__ import annotations

import math

import torch

from .datamodel import Box


def crop_identity(phi_prime: torch.Tensor) -> torch.Tensor:
    """Base-model pass-through."""
    return phi_prime


def box_to_feature_coords(pixel_box: Box, stride: int = 16) -> Box:
    """Smallest feature-grid box covering a pixel box at the given stride."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return Box(
        math.floor(pixel_box.x0 / stride),
        math.floor(pixel_box.y0 / stride),
        math.ceil(pixel_box.x1 / stride),
        math.ceil(pixel_box.y1 / stride),
    )


def crop_instance_region(phi_prime: torch.Tensor) -> torch.Tensor:
    """Central half of phi_prime in each spatial dim.

    Contexts are built from centered 2x-enlarged boxes, so the instance
    region of the merged feature is always rows/cols [Q/4, 3Q/4).
    """
    h, w = phi_prime.shape[-2:]
    if h % 4 or w % 4:
        raise ValueError(f"phi_prime spatial dims must be divisible by 4, got {(h, w)}")
    return phi_prime[..., h // 4 : 3 * h // 4, w // 4 : 3 * w // 4]
