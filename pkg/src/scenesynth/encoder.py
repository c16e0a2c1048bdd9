"""Conditioning encoder: a 1x1 stem plus downsampling residual blocks running
to 4x4, a latent head producing (mu, log-variance), and a top-down pyramid
that merges the coarse features back up to 1/16 input resolution."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

_SQRT2 = math.sqrt(2.0)


def _log2_exact(n: int, what: str) -> int:
    k = int(math.log2(n))
    if 2**k != n:
        raise ValueError(f"{what} must be a power of two, got {n}")
    return k


@dataclass
class EncoderConfig:
    """Geometry and capacity of the conditioning encoder.

    ``resolution`` is (height, width); both sides must be powers of two and
    the smaller side at least 64 so the merged feature lands at exactly
    1/16 input resolution. Channels double per downsampling stage from
    ``stem_channels`` up to ``max_channels``.
    """

    in_channels: int
    resolution: tuple[int, int] | int
    latent_dim: int = 512
    stem_channels: int = 64
    max_channels: int = 512
    pyramid_channels: int | None = None
    pyramid_levels: int = field(init=False)

    def __post_init__(self):
        if isinstance(self.resolution, int):
            self.resolution = (self.resolution, self.resolution)
        self.resolution = tuple(int(r) for r in self.resolution)
        h, w = self.resolution
        _log2_exact(h, "input height")
        _log2_exact(w, "input width")
        if min(h, w) < 64:
            raise ValueError("smaller input side must be >= 64")
        if self.in_channels < 1 or self.latent_dim < 1:
            raise ValueError("in_channels and latent_dim must be positive")
        self.pyramid_levels = _log2_exact(min(h, w), "input") - 6

    @property
    def num_stages(self) -> int:
        return _log2_exact(min(self.resolution), "input") - 2

    @property
    def phi_resolution(self) -> tuple[int, int]:
        return (self.resolution[0] // 16, self.resolution[1] // 16)

    @property
    def terminal_resolution(self) -> tuple[int, int]:
        s = 2**self.num_stages
        return (self.resolution[0] // s, self.resolution[1] // s)

    def channels_after(self, stage: int) -> int:
        """Output channels of downsampling stage `stage` (1-based)."""
        return min(self.stem_channels * 2**stage, self.max_channels)

    @property
    def phi_channels(self) -> int:
        if self.pyramid_channels is not None:
            return self.pyramid_channels
        down_to_phi = _log2_exact(min(self.resolution), "input") - _log2_exact(
            min(self.phi_resolution), "phi"
        )
        return self.channels_after(down_to_phi)


@dataclass
class EncoderOutput:
    """Spatial feature at 1/16 input resolution plus the stochastic latent."""

    phi_prime: torch.Tensor  # (B, C_phi, H/16, W/16)
    mu: torch.Tensor  # (B, latent_dim)
    logvar: torch.Tensor  # (B, latent_dim)
    z: torch.Tensor  # (B, latent_dim)


class Stem(nn.Module):
    """Fixed-width 1x1 convolution lifting the conditioning stack to
    ``out_channels`` features at full resolution."""

    def __init__(self, in_channels: int, out_channels: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        return self.conv(x)


class ResBlockDown(nn.Module):
    """Residual downsampling block: (conv, pool, conv) main branch plus a
    pooled (optionally 1x1-projected) skip, summed and scaled by 1/sqrt(2)."""

    def __init__(self, in_channels: int, out_channels: int, project_skip: bool | None = None):
        super().__init__()
        if project_skip is None:
            project_skip = in_channels != out_channels
        if not project_skip and in_channels != out_channels:
            raise ValueError("identity skip requires matching channel counts")
        self.conv1 = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1, bias=False) if project_skip else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ValueError("spatial dims must be even to downsample")
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = F.avg_pool2d(h, 2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        s = F.avg_pool2d(x, 2)
        if self.skip is not None:
            s = self.skip(s)
        return (h + s) / _SQRT2


class LatentHead(nn.Module):
    """Flatten the terminal feature and emit (mu, logvar) via two linears.

    logvar is clamped to [-30, 20] so exp() stays finite under adversarial
    pressure; the clamp is inactive for any healthy latent scale.
    """

    LOGVAR_RANGE = (-30.0, 20.0)

    def __init__(self, in_channels: int, spatial: tuple[int, int], latent_dim: int):
        super().__init__()
        self.spatial = tuple(spatial)
        flat = in_channels * spatial[0] * spatial[1]
        self.fc_mu = nn.Linear(flat, latent_dim)
        self.fc_logvar = nn.Linear(flat, latent_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if tuple(x.shape[-2:]) != self.spatial:
            raise ValueError(f"latent head expects {self.spatial} spatial dims, got {tuple(x.shape[-2:])}")
        flat = x.flatten(1)
        return self.fc_mu(flat), self.fc_logvar(flat).clamp(*self.LOGVAR_RANGE)


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * eps."""
    if mu.shape != logvar.shape or mu.shape != eps.shape:
        raise ValueError("mu, logvar, and eps must share shapes")
    return mu + torch.exp(0.5 * logvar) * eps


class PyramidMerge(nn.Module):
    """Top-down pass: project the coarsest feature, then repeatedly upsample
    2x, add a 1x1-projected lateral, and convolve once per merge."""

    def __init__(self, feature_channels: list[int], out_channels: int):
        super().__init__()
        if not feature_channels:
            raise ValueError("need at least the coarsest feature")
        self.project = nn.Conv2d(feature_channels[0], out_channels, 1)
        self.laterals = nn.ModuleList(
            nn.Conv2d(ch, out_channels, 1) for ch in feature_channels[1:]
        )
        n_convs = max(1, len(feature_channels) - 1)
        self.smooth = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in range(n_convs)
        )

    def forward(self, features: list[torch.Tensor]) -> torch.Tensor:
        if len(features) != len(self.laterals) + 1:
            raise ValueError(
                f"expected {len(self.laterals) + 1} pyramid features, got {len(features)}"
            )
        x = self.project(features[0])
        if not self.laterals:
            return self.smooth[0](x)
        for lateral, conv, feat in zip(self.laterals, self.smooth, features[1:]):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            if x.shape[-2:] != feat.shape[-2:]:
                raise ValueError("pyramid resolution chain mismatch")
            x = conv(x + lateral(feat))
        return x


class ConditioningEncoder(nn.Module):
    """Full encoder: stem -> residual downsampling chain -> latent head at the
    4x4 terminal, with the last stages merged top-down into phi_prime."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = Stem(cfg.in_channels, cfg.stem_channels)
        channels = [cfg.stem_channels] + [cfg.channels_after(i + 1) for i in range(cfg.num_stages)]
        self.blocks = nn.ModuleList(
            ResBlockDown(channels[i], channels[i + 1]) for i in range(cfg.num_stages)
        )
        self.latent_head = LatentHead(channels[-1], cfg.terminal_resolution, cfg.latent_dim)
        # coarse-to-fine channel list: terminal 4x4 feature then each lateral
        pyramid_in = [channels[-1 - i] for i in range(cfg.pyramid_levels + 1)]
        self.pyramid = PyramidMerge(pyramid_in, cfg.phi_channels)

    def forward(self, x: torch.Tensor, eps: torch.Tensor) -> EncoderOutput:
        if tuple(x.shape[-2:]) != self.cfg.resolution:
            raise ValueError(
                f"encoder expects {self.cfg.resolution} input, got {tuple(x.shape[-2:])}"
            )
        h = self.stem(x)
        feats = []
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        mu, logvar = self.latent_head(feats[-1])
        z = reparameterize(mu, logvar, eps)
        pyramid_feats = [feats[-1 - i] for i in range(self.cfg.pyramid_levels + 1)]
        phi_prime = self.pyramid(pyramid_feats)
        return EncoderOutput(phi_prime=phi_prime, mu=mu, logvar=logvar, z=z)
