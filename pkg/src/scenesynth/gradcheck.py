"""Central finite-difference verification of every differentiable operation
against autograd, at float64 on toy shapes."""
from __future__ import annotations

import torch

from .decoder import DecoderConfig, MappingNetwork, ModulatedConv2d, SynthesisDecoder
from .encoder import LatentHead, PyramidMerge, ResBlockDown, Stem, reparameterize
from .losses import (
    Discriminator,
    DiscriminatorConfig,
    IdentityExtractor,
    RandomConvExtractor,
    d_adv_loss,
    g_adv_loss,
    kl_loss,
    path_length_penalty,
    perceptual_loss,
    r1_penalty,
)

DEFAULT_TOLERANCE = 1e-3


def finite_difference_grad(fn, tensor: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of the scalar fn() w.r.t. one tensor,
    perturbing it in place element by element.

    fn() is evaluated with grad enabled (some losses differentiate
    internally); only the perturbation writes bypass autograd.
    """
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
        f_plus = float(fn().detach())
        with torch.no_grad():
            flat[i] = orig - eps
        f_minus = float(fn().detach())
        with torch.no_grad():
            flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def max_rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """max |a - n| normalized by the larger gradient magnitude."""
    num = (analytic - numeric).abs().max().item()
    den = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
    return num / den


def check_gradients(scalar_fn, tensors: dict[str, torch.Tensor], eps: float = 1e-5) -> float:
    """Worst relative disagreement between autograd and finite differences of
    scalar_fn() over the given float64 leaf tensors."""
    for t in tensors.values():
        if t.dtype != torch.float64:
            raise ValueError("gradient checks run at float64")
        t.requires_grad_(True)
        t.grad = None
    loss = scalar_fn()
    loss.backward()
    worst = 0.0
    for t in tensors.values():
        analytic = t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
        numeric = finite_difference_grad(scalar_fn, t.detach(), eps=eps)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def _params_of(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {name: p for name, p in module.named_parameters() if p.requires_grad}


def check_encoder() -> dict[str, float]:
    torch.manual_seed(0)
    results = {}

    stem = Stem(5, 4).double()
    x = torch.randn(2, 5, 6, 6, dtype=torch.float64)
    tensors = {"x": x, **_params_of(stem)}
    results["stem"] = check_gradients(lambda: stem(tensors["x"]).pow(2).sum(), tensors)

    block = ResBlockDown(3, 5).double()
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    tensors = {"x": x, **_params_of(block)}
    results["resblock_down"] = check_gradients(lambda: block(tensors["x"]).pow(2).sum(), tensors)

    head = LatentHead(4, (4, 4), 6).double()
    x = torch.randn(2, 4, 4, 4, dtype=torch.float64)
    tensors = {"x": x, **_params_of(head)}

    def head_loss():
        mu, logvar = head(tensors["x"])
        return mu.pow(2).sum() + (logvar * 0.5).sum()

    results["latent_head"] = check_gradients(head_loss, tensors)

    mu = torch.randn(2, 6, dtype=torch.float64)
    logvar = torch.randn(2, 6, dtype=torch.float64) * 0.3
    fixed_eps = torch.randn(2, 6, dtype=torch.float64)
    tensors = {"mu": mu, "logvar": logvar}
    results["reparameterize"] = check_gradients(
        lambda: reparameterize(tensors["mu"], tensors["logvar"], fixed_eps).pow(2).sum(), tensors
    )

    merge = PyramidMerge([6, 4], out_channels=5).double()
    coarse = torch.randn(2, 6, 4, 4, dtype=torch.float64)
    fine = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    tensors = {"coarse": coarse, "fine": fine, **_params_of(merge)}
    results["pyramid_merge"] = check_gradients(
        lambda: merge([tensors["coarse"], tensors["fine"]]).pow(2).sum(), tensors
    )
    return results


def check_decoder() -> dict[str, float]:
    torch.manual_seed(1)
    results = {}

    mapping = MappingNetwork(6, 6, depth=2).double()
    z = torch.randn(2, 6, dtype=torch.float64)
    tensors = {"z": z, **_params_of(mapping)}
    results["map_latent"] = check_gradients(lambda: mapping(tensors["z"]).pow(2).sum(), tensors)

    conv = ModulatedConv2d(3, 4, 3, style_dim=5).double()
    x = torch.randn(2, 3, 6, 6, dtype=torch.float64)
    w = torch.randn(2, 5, dtype=torch.float64)
    tensors = {"x": x, "w": w, **_params_of(conv)}
    results["modulated_conv"] = check_gradients(
        lambda: conv(tensors["x"], tensors["w"]).pow(2).sum(), tensors
    )

    cfg = DecoderConfig(
        output_res=16, phi_res=4, phi_channels=3, latent_dim=6, style_dim=6,
        mapping_depth=1, max_channels=8, base_channels=4,
    )
    dec = SynthesisDecoder(cfg).double()
    phi = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    z = torch.randn(1, 6, dtype=torch.float64)
    tensors = {"phi": phi, "z": z, **_params_of(dec)}
    results["decode"] = check_gradients(
        lambda: dec(tensors["phi"], tensors["z"]).pow(2).sum(), tensors
    )
    return results


def check_discriminator() -> dict[str, float]:
    torch.manual_seed(2)
    disc = Discriminator(DiscriminatorConfig(input_res=8, max_channels=8, base_channels=4)).double()
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    tensors = {"x": x, **_params_of(disc)}
    return {"discriminate": check_gradients(lambda: disc(tensors["x"]).pow(2).sum(), tensors)}


def check_losses() -> dict[str, float]:
    torch.manual_seed(3)
    results = {}

    scores = torch.randn(5, dtype=torch.float64)
    results["g_adv_loss"] = check_gradients(lambda: g_adv_loss(scores), {"scores": scores})

    real = torch.randn(5, dtype=torch.float64)
    fake = torch.randn(5, dtype=torch.float64)
    results["d_adv_loss"] = check_gradients(
        lambda: d_adv_loss(real, fake), {"real": real, "fake": fake}
    )

    mu = torch.randn(3, 4, dtype=torch.float64)
    logvar = torch.randn(3, 4, dtype=torch.float64) * 0.5
    results["kl_loss"] = check_gradients(
        lambda: kl_loss(mu, logvar), {"mu": mu, "logvar": logvar}
    )

    extractor = RandomConvExtractor(seed=7).double()
    gen = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    realimg = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    results["perceptual_loss"] = check_gradients(
        lambda: perceptual_loss(gen, realimg, extractor), {"gen": gen, "real": realimg}
    )
    results["perceptual_identity"] = check_gradients(
        lambda: perceptual_loss(gen, realimg, IdentityExtractor()), {"gen": gen}
    )

    # R1: differentiate the penalty itself (second-order path) w.r.t. D params
    disc = Discriminator(
        DiscriminatorConfig(input_res=8, max_channels=4, base_channels=4, minibatch_stddev=False)
    ).double()
    images = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    params = _params_of(disc)

    def r1_fn():
        leaf = images.detach().requires_grad_(True)
        return r1_penalty(leaf, disc, weight=10.0)

    results["r1_penalty"] = check_gradients(r1_fn, params)

    # path length: toy linear generator, penalty gradient w.r.t. the map.
    # decay=1 freezes the running target, which autograd treats as constant,
    # so finite differences see the same objective.
    m = torch.randn(6, 4, dtype=torch.float64)
    w_in = torch.randn(3, 4, dtype=torch.float64)
    noise_seed = 11

    def pl_fn():
        w_leaf = w_in.detach().requires_grad_(True)
        images = (w_leaf @ m.t()).reshape(3, 1, 2, 3)
        gen = torch.Generator().manual_seed(noise_seed)
        penalty, _ = path_length_penalty(
            w_leaf, images, torch.full((), 0.5, dtype=torch.float64), decay=1.0, generator=gen
        )
        return penalty

    results["path_length_penalty"] = check_gradients(pl_fn, {"m": m})
    return results


SUITES = {
    "encoder": check_encoder,
    "decoder": check_decoder,
    "discriminator": check_discriminator,
    "losses": check_losses,
}


def run_suites(modules=None, tolerance: float = DEFAULT_TOLERANCE) -> tuple[dict, bool]:
    """Run the requested suites; returns (per-op errors, all-passed flag)."""
    modules = list(SUITES) if not modules else list(modules)
    unknown = [m for m in modules if m not in SUITES]
    if unknown:
        raise KeyError(f"unknown gradcheck module(s): {unknown}")
    report = {}
    for name in modules:
        report.update({f"{name}.{op}": err for op, err in SUITES[name]().items()})
    return report, all(err <= tolerance for err in report.values())
