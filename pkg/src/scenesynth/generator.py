"""Conditional generator: conditioning encoder -> feature crop -> synthesis
decoder. The base model uses the identity crop; class-specific models crop
the central instance half before decoding."""
from __future__ import annotations

import torch
from torch import nn

from .decoder import DecoderConfig, SynthesisDecoder
from .encoder import ConditioningEncoder, EncoderConfig, EncoderOutput
from .feature_crop import crop_identity, crop_instance_region

CROP_MODES = ("identity", "central_half")


class ConditionalGenerator(nn.Module):
    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, crop_mode: str = "identity"):
        super().__init__()
        if crop_mode not in CROP_MODES:
            raise ValueError(f"crop_mode must be one of {CROP_MODES}")
        phi_min = min(enc_cfg.phi_resolution)
        expected = phi_min if crop_mode == "identity" else phi_min // 2
        if dec_cfg.phi_res != expected:
            raise ValueError(
                f"decoder phi_res {dec_cfg.phi_res} inconsistent with encoder output "
                f"{enc_cfg.phi_resolution} under crop mode {crop_mode!r}"
            )
        if dec_cfg.phi_channels != enc_cfg.phi_channels:
            raise ValueError("decoder phi_channels must equal encoder phi_channels")
        self.crop_mode = crop_mode
        self.encoder = ConditioningEncoder(enc_cfg)
        self.decoder = SynthesisDecoder(dec_cfg)

    def crop(self, phi_prime: torch.Tensor) -> torch.Tensor:
        if self.crop_mode == "identity":
            return crop_identity(phi_prime)
        return crop_instance_region(phi_prime)

    def forward(
        self,
        cond: torch.Tensor,
        eps: torch.Tensor,
        noise_mode: str = "none",
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, EncoderOutput, torch.Tensor]:
        """Returns (image, encoder output, style vector)."""
        enc = self.encoder(cond, eps)
        phi = self.crop(enc.phi_prime)
        w = self.decoder.map_latent(enc.z)
        image = self.decoder.synthesize(phi, w, noise_mode=noise_mode, generator=generator)
        return image, enc, w
