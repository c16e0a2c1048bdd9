"""Discriminator and every training loss term: non-saturating adversarial
losses, R1 and path-length regularizers, latent KL, and the perceptual loss
with pluggable feature extractors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import autograd, nn

_SQRT2 = math.sqrt(2.0)


@dataclass
class LossWeights:
    """Loss weights and regularizer cadences.

    Regularizers run lazily: on iterations divisible by their cadence, scaled
    by the cadence so the expected gradient matches the every-step objective.
    ``compensate_perceptual`` applies the same scaling to the perceptual term.
    """

    lambda_kl: float = 0.01
    lambda_perceptual: float = 1.0
    pathlen_weight: float = 2.0
    r1_weight: float = 10.0
    r1_every: int = 16
    pathlen_every: int = 4
    perceptual_every: int = 4
    compensate_perceptual: bool = True
    pathlen_decay: float = 0.99

    def __post_init__(self):
        for name in ("lambda_kl", "lambda_perceptual", "pathlen_weight", "r1_weight"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("r1_every", "pathlen_every", "perceptual_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def r1_active(self, iteration: int) -> bool:
        return iteration % self.r1_every == 0

    def pathlen_active(self, iteration: int) -> bool:
        return iteration % self.pathlen_every == 0

    def perceptual_active(self, iteration: int) -> bool:
        return iteration % self.perceptual_every == 0


# ---------------------------------------------------------------------------
# discriminator


class EqualizedConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        self.padding = kernel_size // 2

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)


class EqualizedLinearD(nn.Module):
    def __init__(self, in_features, out_features):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features))
        self.scale = 1.0 / math.sqrt(in_features)

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


class DiscResBlock(nn.Module):
    """Downsampling residual block with a 1x1-projected skip, sum / sqrt(2)."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv1 = EqualizedConv2d(in_channels, in_channels, 3)
        self.conv2 = EqualizedConv2d(in_channels, out_channels, 3)
        self.skip = EqualizedConv2d(in_channels, out_channels, 1, bias=False)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), 0.2) * _SQRT2
        h = F.avg_pool2d(h, 2)
        h = F.leaky_relu(self.conv2(h), 0.2) * _SQRT2
        s = self.skip(F.avg_pool2d(x, 2))
        return (h + s) / _SQRT2


class MinibatchStdDev(nn.Module):
    """Append one channel holding the cross-batch feature standard deviation."""

    def __init__(self, group_size: int = 4, eps: float = 1e-8):
        super().__init__()
        self.group_size = group_size
        self.eps = eps

    def forward(self, x):
        b, c, h, w = x.shape
        g = min(self.group_size, b)
        while b % g:
            g -= 1
        y = x.reshape(g, b // g, c, h, w)
        y = y - y.mean(dim=0, keepdim=True)
        y = torch.sqrt(y.pow(2).mean(dim=0) + self.eps)
        y = y.mean(dim=(1, 2, 3), keepdim=True)
        y = y.repeat(g, 1, h, w)
        return torch.cat([x, y], dim=1)


@dataclass
class DiscriminatorConfig:
    input_res: int
    max_channels: int = 512
    base_channels: int = 64
    minibatch_stddev: bool = True

    def __post_init__(self):
        k = int(math.log2(self.input_res))
        if 2**k != self.input_res or self.input_res < 8:
            raise ValueError("discriminator input_res must be a power of two >= 8")

    def channels_at(self, res: int) -> int:
        return min(self.max_channels, self.base_channels * self.input_res // res)


class Discriminator(nn.Module):
    """Residual convolutional critic mapping an image to one real logit."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        res = cfg.input_res
        self.from_rgb = EqualizedConv2d(3, cfg.channels_at(res), 1)
        blocks = []
        while res > 4:
            blocks.append(DiscResBlock(cfg.channels_at(res), cfg.channels_at(res // 2)))
            res //= 2
        self.blocks = nn.ModuleList(blocks)
        final_ch = cfg.channels_at(4)
        self.stddev = MinibatchStdDev() if cfg.minibatch_stddev else None
        self.final_conv = EqualizedConv2d(final_ch + (1 if cfg.minibatch_stddev else 0), final_ch, 3)
        self.fc = EqualizedLinearD(final_ch * 16, final_ch)
        self.out = EqualizedLinearD(final_ch, 1)

    def forward(self, x):
        if x.shape[-1] != self.cfg.input_res or x.shape[-2] != self.cfg.input_res:
            raise ValueError(
                f"discriminator expects {self.cfg.input_res}^2 input, got {tuple(x.shape[-2:])}"
            )
        h = F.leaky_relu(self.from_rgb(x), 0.2) * _SQRT2
        for block in self.blocks:
            h = block(h)
        if self.stddev is not None:
            h = self.stddev(h)
        h = F.leaky_relu(self.final_conv(h), 0.2) * _SQRT2
        h = F.leaky_relu(self.fc(h.flatten(1)), 0.2) * _SQRT2
        return self.out(h).squeeze(1)


def split_nonsquare(image: torch.Tensor) -> torch.Tensor:
    """Split a (B, C, H, 2H) image into its left/right squares, batch-stacked."""
    h, w = image.shape[-2:]
    if w != 2 * h:
        raise ValueError(f"width must be twice the height, got {h}x{w}")
    return torch.cat([image[..., :, :h], image[..., :, h:]], dim=0)


def merge_nonsquare(halves: torch.Tensor) -> torch.Tensor:
    """Inverse of split_nonsquare."""
    if halves.shape[0] % 2:
        raise ValueError("batch must contain an even number of halves")
    b = halves.shape[0] // 2
    return torch.cat([halves[:b], halves[b:]], dim=-1)


# ---------------------------------------------------------------------------
# loss terms


def g_adv_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss: mean softplus(-score)."""
    return F.softplus(-fake_scores).mean()


def d_adv_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Logistic discriminator loss: mean softplus(-real) + mean softplus(fake)."""
    return F.softplus(-real_scores).mean() + F.softplus(fake_scores).mean()


def r1_penalty(real_images: torch.Tensor, discriminator, weight: float = 10.0) -> torch.Tensor:
    """(weight / 2) * E[ ||grad_x D(x)||^2 ] on real samples.

    ``real_images`` must be a leaf with gradient tracking enabled.
    """
    if not real_images.requires_grad:
        raise ValueError("real_images must require grad for the R1 penalty")
    scores = discriminator(real_images)
    (grad,) = autograd.grad(scores.sum(), real_images, create_graph=True)
    return 0.5 * weight * grad.flatten(1).pow(2).sum(dim=1).mean()


def path_length_penalty(
    w_styles: torch.Tensor,
    generated_images: torch.Tensor,
    ema_target: torch.Tensor,
    weight: float = 2.0,
    decay: float = 0.99,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Penalize deviation of ||J_w^T y|| from its running mean.

    y is standard normal scaled by 1 / sqrt(pixels); the running mean
    ``ema_target`` is updated in place-free fashion and returned.
    """
    h, w = generated_images.shape[-2:]
    y = torch.randn(
        generated_images.shape,
        generator=generator,
        dtype=generated_images.dtype,
        device=generated_images.device,
    ) / math.sqrt(h * w)
    (grad,) = autograd.grad((generated_images * y).sum(), w_styles, create_graph=True)
    if grad.ndim == 3:  # (B, layers, style_dim)
        lengths = grad.pow(2).sum(dim=2).mean(dim=1).sqrt()
    else:
        lengths = grad.pow(2).sum(dim=1).sqrt()
    ema_target = torch.as_tensor(ema_target, dtype=lengths.dtype)
    new_target = ema_target + (1.0 - decay) * (lengths.detach().mean() - ema_target)
    penalty = weight * (lengths - new_target).pow(2).mean()
    return penalty, new_target


def kl_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims, batch mean."""
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar must share shapes")
    per_sample = -0.5 * (1.0 + logvar - mu.pow(2) - logvar.exp()).sum(dim=1)
    return per_sample.mean()


def perceptual_loss(gen_image: torch.Tensor, real_image: torch.Tensor, extractor) -> torch.Tensor:
    """Sum over extractor layers of the mean absolute activation difference."""
    if gen_image.shape != real_image.shape:
        raise ValueError("images must share shapes")
    total = None
    for a, b in zip(extractor.extract(gen_image), extractor.extract(real_image)):
        term = (a - b).abs().mean()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("extractor declared no layers")
    return total


def total_loss(
    parts: dict, weights: LossWeights, iteration: int, compensate: bool = True
) -> tuple[torch.Tensor, dict]:
    """Weighted sum of computed loss parts honoring the regularizer cadences.

    Recognized keys: ``g_adv``, ``d_adv``, ``kl``, ``perceptual``, ``r1``,
    ``path_length``. Cadenced parts supplied on off-schedule iterations are
    dropped. Returns the total plus the applied weighted contributions.
    """
    applied: dict[str, torch.Tensor] = {}
    if "g_adv" in parts:
        applied["g_adv"] = parts["g_adv"]
    if "d_adv" in parts:
        applied["d_adv"] = parts["d_adv"]
    if "kl" in parts:
        applied["kl"] = weights.lambda_kl * parts["kl"]
    if "perceptual" in parts and weights.perceptual_active(iteration):
        comp = weights.perceptual_every if (compensate and weights.compensate_perceptual) else 1
        applied["perceptual"] = weights.lambda_perceptual * comp * parts["perceptual"]
    if "r1" in parts and weights.r1_active(iteration):
        applied["r1"] = (weights.r1_every if compensate else 1) * parts["r1"]
    if "path_length" in parts and weights.pathlen_active(iteration):
        applied["path_length"] = (weights.pathlen_every if compensate else 1) * parts["path_length"]
    if not applied:
        return torch.zeros(()), {}
    total = None
    for value in applied.values():
        total = value if total is None else total + value
    return total, applied


# ---------------------------------------------------------------------------
# perceptual feature extractors


class IdentityExtractor(nn.Module):
    """Degenerate single-layer extractor: the image itself."""

    def extract(self, images: torch.Tensor) -> list[torch.Tensor]:
        return [images]


class RandomConvExtractor(nn.Module):
    """Fixed random-weight convolutional stack exposing one activation per
    stage, with the raw image as its first declared layer. Weights come from
    a dedicated seeded generator, so the extractor is identical across runs
    and never trained."""

    def __init__(
        self,
        seed: int = 1234,
        channels: tuple[int, ...] = (16, 32, 64),
        include_input: bool = True,
    ):
        super().__init__()
        self.include_input = include_input
        gen = torch.Generator().manual_seed(seed)
        convs = []
        in_ch = 3
        for out_ch in channels:
            conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) / math.sqrt(in_ch * 9)
                )
                conv.bias.zero_()
            convs.append(conv)
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def extract(self, images: torch.Tensor) -> list[torch.Tensor]:
        acts = [images] if self.include_input else []
        h = images
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            acts.append(h)
            h = F.avg_pool2d(h, 2)
        return acts


def make_extractor(kind: str = "random_conv", seed: int = 1234, weights_path=None):
    """Factory for the perceptual extractor; ``file`` loads externally
    supplied pretrained weights into the conv-stack layout."""
    if kind == "identity":
        return IdentityExtractor()
    if kind == "random_conv":
        return RandomConvExtractor(seed=seed)
    if kind == "file":
        if weights_path is None:
            raise ValueError("extractor kind 'file' requires weights_path")
        extractor = RandomConvExtractor(seed=seed)
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        extractor.load_state_dict(state)
        for p in extractor.parameters():
            p.requires_grad_(False)
        return extractor
    raise ValueError(f"unknown extractor kind {kind!r}")
