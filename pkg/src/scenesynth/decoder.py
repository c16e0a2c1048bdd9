"""Style-modulated synthesis decoder. The usual learned constant is replaced
by the (possibly cropped) encoder feature phi, so the low-resolution blocks a
synthesis network would normally start with are skipped; remaining blocks
upsample 2x each with per-resolution RGB skip accumulation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

_SQRT2 = math.sqrt(2.0)


def compute_skip_K(phi_res: int) -> int:
    """Number of leading synthesis blocks (4x4 up to phi_res) made redundant
    by starting from a phi_res feature instead of a 4x4 constant."""
    if phi_res < 4:
        raise ValueError("phi_res must be >= 4")
    k = int(math.log2(phi_res))
    if 2**k != phi_res:
        raise ValueError("phi_res must be a power of two")
    return k - 2


@dataclass
class DecoderConfig:
    """Geometry of the synthesis network.

    Resolutions refer to the smaller spatial side; rectangular features keep
    their aspect ratio through the upsampling chain.
    """

    output_res: int
    phi_res: int
    phi_channels: int
    latent_dim: int = 512
    style_dim: int = 512
    mapping_depth: int = 8
    max_channels: int = 512
    base_channels: int = 64

    def __post_init__(self):
        self.skip_k = compute_skip_K(self.phi_res)
        ratio = self.output_res / self.phi_res
        if ratio < 1 or 2 ** int(math.log2(ratio)) != ratio:
            raise ValueError("output_res / phi_res must be a power of two >= 1")
        if self.mapping_depth < 0:
            raise ValueError("mapping_depth must be >= 0")

    @property
    def num_blocks(self) -> int:
        return int(math.log2(self.output_res // self.phi_res))

    def channels_at(self, res: int) -> int:
        return min(self.max_channels, self.base_channels * self.output_res // res)


class EqualizedLinear(nn.Module):
    """Fully connected layer with runtime weight scaling (equalized lr)."""

    def __init__(self, in_features: int, out_features: int, lr_mul: float = 1.0, bias_init: float = 0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_features,), bias_init))
        self.scale = lr_mul / math.sqrt(in_features)
        self.lr_mul = lr_mul

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)


class MappingNetwork(nn.Module):
    """z -> w: RMS-normalize, then `depth` equalized linears with leaky
    rectifier gains. depth=0 passes the normalized latent through."""

    def __init__(self, latent_dim: int, style_dim: int, depth: int, lr_mul: float = 0.01):
        super().__init__()
        if depth == 0 and latent_dim != style_dim:
            raise ValueError("depth-0 mapping requires latent_dim == style_dim")
        dims = [latent_dim] + [style_dim] * depth
        self.layers = nn.ModuleList(
            EqualizedLinear(dims[i], dims[i + 1], lr_mul=lr_mul) for i in range(depth)
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = F.leaky_relu(layer(x), 0.2) * _SQRT2
        return x


def modulated_conv2d(
    x: torch.Tensor,
    styles: torch.Tensor,
    weight: torch.Tensor,
    demodulate: bool = True,
    padding: int = 0,
    eps: float = 1e-8,
) -> torch.Tensor:
    """Convolution with per-sample, per-input-channel weight scaling.

    ``styles`` is (B, in_ch); ``weight`` is (out_ch, in_ch, k, k). With
    demodulation each output filter is rescaled to unit L2 norm, which
    cancels any common scale applied to the styles.
    """
    b, in_ch, h, w = x.shape
    out_ch = weight.shape[0]
    w_mod = weight.unsqueeze(0) * styles.reshape(b, 1, in_ch, 1, 1)
    if demodulate:
        d = torch.rsqrt(w_mod.pow(2).sum(dim=(2, 3, 4)) + eps)
        w_mod = w_mod * d.reshape(b, out_ch, 1, 1, 1)
    out = F.conv2d(
        x.reshape(1, b * in_ch, h, w),
        w_mod.reshape(b * out_ch, in_ch, *weight.shape[2:]),
        padding=padding,
        groups=b,
    )
    return out.reshape(b, out_ch, out.shape[-2], out.shape[-1])


class ModulatedConv2d(nn.Module):
    """Modulated convolution whose per-channel scales come from an affine map
    of the style vector (bias initialized at 1)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        style_dim: int,
        demodulate: bool = True,
    ):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.affine = EqualizedLinear(style_dim, in_channels, bias_init=1.0)
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.padding = kernel_size // 2
        self.demodulate = demodulate

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        styles = self.affine(w)
        return modulated_conv2d(
            x, styles, self.weight * self.scale, demodulate=self.demodulate, padding=self.padding
        )


class NoiseInjection(nn.Module):
    """Optional per-pixel noise with a learned strength (init 0)."""

    def __init__(self):
        super().__init__()
        self.strength = nn.Parameter(torch.zeros(()))

    def forward(self, x, noise_mode: str = "none", generator=None):
        if noise_mode == "none":
            return x
        if noise_mode != "random":
            raise ValueError(f"unknown noise_mode {noise_mode!r}")
        n = torch.randn(
            (x.shape[0], 1, x.shape[2], x.shape[3]),
            generator=generator,
            dtype=x.dtype,
            device=x.device,
        )
        return x + self.strength * n


class StyleLayer(nn.Module):
    """Modulated 3x3 conv + noise + bias + leaky activation, optionally
    preceded by a 2x nearest upsample."""

    def __init__(self, in_channels, out_channels, style_dim, upsample=False):
        super().__init__()
        self.upsample = upsample
        self.conv = ModulatedConv2d(in_channels, out_channels, 3, style_dim)
        self.noise = NoiseInjection()
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x, w, noise_mode="none", generator=None):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv(x, w)
        x = self.noise(x, noise_mode=noise_mode, generator=generator)
        return F.leaky_relu(x + self.bias.reshape(1, -1, 1, 1), 0.2) * _SQRT2


class ToRGB(nn.Module):
    """Modulated 1x1 projection to RGB (no demodulation)."""

    def __init__(self, in_channels, style_dim):
        super().__init__()
        self.conv = ModulatedConv2d(in_channels, 3, 1, style_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(3))

    def forward(self, x, w):
        return self.conv(x, w) + self.bias.reshape(1, -1, 1, 1)


class SynthesisDecoder(nn.Module):
    """Maps (phi, z) to an image in roughly [-1, 1].

    Layout: one style layer + RGB head at phi resolution, then one upsampling
    block (two style layers + RGB head, skip-accumulated) per doubling up to
    the output resolution. One broadcast style drives all layers.
    """

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.mapping = MappingNetwork(cfg.latent_dim, cfg.style_dim, cfg.mapping_depth)
        res = cfg.phi_res
        self.input_layer = StyleLayer(cfg.phi_channels, cfg.channels_at(res), cfg.style_dim)
        self.input_rgb = ToRGB(cfg.channels_at(res), cfg.style_dim)
        blocks = []
        rgbs = []
        for _ in range(cfg.num_blocks):
            in_ch, res = cfg.channels_at(res), res * 2
            out_ch = cfg.channels_at(res)
            blocks.append(
                nn.ModuleList(
                    [
                        StyleLayer(in_ch, out_ch, cfg.style_dim, upsample=True),
                        StyleLayer(out_ch, out_ch, cfg.style_dim),
                    ]
                )
            )
            rgbs.append(ToRGB(out_ch, cfg.style_dim))
        self.blocks = nn.ModuleList(blocks)
        self.rgbs = nn.ModuleList(rgbs)

    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping(z)

    def synthesize(self, phi, w, noise_mode="none", generator=None):
        if min(phi.shape[-2:]) != self.cfg.phi_res:
            raise ValueError(
                f"phi smaller side must be {self.cfg.phi_res}, got {tuple(phi.shape[-2:])}"
            )
        x = self.input_layer(phi, w, noise_mode=noise_mode, generator=generator)
        rgb = self.input_rgb(x, w)
        for block, to_rgb in zip(self.blocks, self.rgbs):
            for layer in block:
                x = layer(x, w, noise_mode=noise_mode, generator=generator)
            rgb = to_rgb(x, w) + F.interpolate(
                rgb, scale_factor=2, mode="bilinear", align_corners=False
            )
        return rgb

    def forward(self, phi, z, noise_mode="none", generator=None, return_w=False):
        w = self.map_latent(z)
        img = self.synthesize(phi, w, noise_mode=noise_mode, generator=generator)
        if return_w:
            return img, w
        return img
