"""Optimization loops for the base generator and the class-specific
generators: batch assembly with minimum-size filtering, alternating
discriminator/generator steps with lazy regularization, generator weight
averaging, deterministic RNG handling, and versioned checkpoints."""
from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .datamodel import Corpus, InstanceRecord, SceneSample, build_context, crop_with_padding, one_hot, resize_image
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .generator import ConditionalGenerator
from .losses import (
    Discriminator,
    DiscriminatorConfig,
    LossWeights,
    d_adv_loss,
    g_adv_loss,
    kl_loss,
    make_extractor,
    path_length_penalty,
    perceptual_loss,
    r1_penalty,
    split_nonsquare,
    total_loss,
)

CHECKPOINT_MAGIC = b"SSYN"
CHECKPOINT_VERSION = 1

# instances smaller than half the class model resolution are too coarse to
# supervise it and are excluded from training batches
MIN_INSTANCE_FRACTION = 2


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class ClassDataError(RuntimeError):
    pass


@dataclass
class ClassRole:
    class_id: int
    model_res: int = 128
    removal_mode: str = "blur"
    ablate_context: bool = False  # zero the context image (context-dependence study)

    def __post_init__(self):
        if self.model_res < 64 or self.model_res & (self.model_res - 1):
            raise ValueError("class model_res must be a power of two >= 64")

    @property
    def min_instance_size(self) -> int:
        return self.model_res // MIN_INSTANCE_FRACTION

    @property
    def context_res(self) -> int:
        return 2 * self.model_res


@dataclass
class TrainConfig:
    role: str = "base"  # "base" or "class"
    class_role: ClassRole | None = None
    resolution: int = 64  # base canvas size (smaller side)
    num_classes: int = 4
    batch_size: int = 8
    total_iterations: int = 2000
    g_lr: float = 0.002
    d_lr: float = 0.002
    ema_decay: float = 0.999
    seed: int = 0
    latent_dim: int = 64
    style_dim: int = 64
    mapping_depth: int = 2
    stem_channels: int = 64
    max_channels: int = 128
    d_max_channels: int | None = None  # discriminator capacity; None = max_channels
    d_minibatch_stddev: bool = True
    pyramid_channels: int | None = None
    noise_mode: str = "random"
    loss: LossWeights = field(default_factory=LossWeights)
    extractor_kind: str = "random_conv"
    extractor_seed: int = 1234
    extractor_weights: str | None = None
    eval_every: int = 100
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.role not in ("base", "class"):
            raise ValueError("role must be 'base' or 'class'")
        if self.role == "class" and self.class_role is None:
            raise ValueError("class role requires class_role settings")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if isinstance(self.class_role, dict):
            self.class_role = ClassRole(**self.class_role)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# batch assembly


def scene_condition(scene: SceneSample) -> np.ndarray:
    """cat(one-hot semantics, edge map) as a (C, H, W) float32 stack."""
    sem = one_hot(scene.semantic.labels, scene.semantic.num_classes)
    stack = np.concatenate([sem, scene.edges.edges[..., None].astype(np.float32)], axis=2)
    return np.ascontiguousarray(stack.transpose(2, 0, 1))


def make_base_batch(corpus: Corpus, indices) -> tuple[torch.Tensor, torch.Tensor]:
    """Conditioning stacks and [-1, 1] targets for the scene generator."""
    conds, targets = [], []
    for idx in indices:
        scene = corpus[int(idx)]
        conds.append(scene_condition(scene))
        targets.append(scene.image.transpose(2, 0, 1) * 2.0 - 1.0)
    cond = torch.from_numpy(np.stack(conds)).float()
    target = torch.from_numpy(np.stack(targets).astype(np.float32))
    return cond, target


def eligible_instances(
    corpus: Corpus, class_id: int, model_res: int
) -> list[tuple[int, InstanceRecord]]:
    """(scene index, record) pairs of the class that meet the minimum size."""
    min_size = model_res // MIN_INSTANCE_FRACTION
    out = []
    for si, scene in enumerate(corpus.scenes):
        for rec in scene.instance_records():
            if rec.class_id != class_id:
                continue
            if rec.tight_box.width < min_size or rec.tight_box.height < min_size:
                continue
            out.append((si, rec))
    return out


def context_condition(ctx_stacked: np.ndarray) -> np.ndarray:
    """Channel-first conditioning stack from cat(C_i, C_s); image channels are
    mapped to [-1, 1], one-hot channels kept binary."""
    chw = np.ascontiguousarray(ctx_stacked.transpose(2, 0, 1)).astype(np.float32)
    chw[:3] = chw[:3] * 2.0 - 1.0
    return chw


def instance_target(scene: SceneSample, rec: InstanceRecord, model_res: int) -> np.ndarray:
    """Tight-box crop of the real image resized to the model resolution, in
    [-1, 1] channel-first layout."""
    crop = crop_with_padding(scene.image, rec.tight_box, 0.0)
    crop = resize_image(crop.astype(np.float32), model_res, model_res, "bilinear")
    return np.ascontiguousarray(crop.transpose(2, 0, 1)) * 2.0 - 1.0


def make_class_batch(
    corpus: Corpus,
    class_id: int,
    model_res: int,
    removal_mode: str,
    indices,
    records: list[tuple[int, InstanceRecord]] | None = None,
    ablate_context: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Context stacks and tight-crop targets for one class generator.

    ``indices`` select from the eligible-record list (scene-major order).
    """
    if records is None:
        records = eligible_instances(corpus, class_id, model_res)
    if not records:
        min_size = model_res // MIN_INSTANCE_FRACTION
        raise ClassDataError(
            f"no instances of class {class_id} with tight box >= "
            f"{min_size}x{min_size} (model_res {model_res})"
        )
    conds, targets = [], []
    for idx in indices:
        si, rec = records[int(idx)]
        scene = corpus[si]
        ctx = build_context(scene, rec, removal_mode, 2 * model_res)
        stacked = ctx.stacked()
        if ablate_context:
            stacked = stacked.copy()
            stacked[..., :3] = 0.0
        conds.append(context_condition(stacked))
        targets.append(instance_target(scene, rec, model_res))
    return torch.from_numpy(np.stack(conds)), torch.from_numpy(np.stack(targets))


# ---------------------------------------------------------------------------
# model construction


def build_models(cfg: TrainConfig) -> tuple[ConditionalGenerator, Discriminator]:
    if cfg.role == "base":
        in_channels = cfg.num_classes + 1
        enc_res = cfg.resolution
        out_res = cfg.resolution
        crop_mode = "identity"
    else:
        in_channels = 3 + cfg.num_classes
        enc_res = cfg.class_role.context_res
        out_res = cfg.class_role.model_res
        crop_mode = "central_half"
    enc_cfg = EncoderConfig(
        in_channels=in_channels,
        resolution=enc_res,
        latent_dim=cfg.latent_dim,
        stem_channels=cfg.stem_channels,
        max_channels=cfg.max_channels,
        pyramid_channels=cfg.pyramid_channels,
    )
    phi_res = min(enc_cfg.phi_resolution) if crop_mode == "identity" else min(enc_cfg.phi_resolution) // 2
    dec_cfg = DecoderConfig(
        output_res=out_res,
        phi_res=phi_res,
        phi_channels=enc_cfg.phi_channels,
        latent_dim=cfg.latent_dim,
        style_dim=cfg.style_dim,
        mapping_depth=cfg.mapping_depth,
        max_channels=cfg.max_channels,
    )
    generator = ConditionalGenerator(enc_cfg, dec_cfg, crop_mode)
    disc = Discriminator(
        DiscriminatorConfig(
            input_res=out_res,
            max_channels=cfg.d_max_channels or cfg.max_channels,
            minibatch_stddev=cfg.d_minibatch_stddev,
        )
    )
    return generator, disc


def _lazy_adam(params, lr: float, every: int):
    """Adam with the learning rate and betas rescaled for lazy regularization."""
    ratio = every / (every + 1)
    betas = (0.0**ratio, 0.99**ratio)
    return torch.optim.Adam(params, lr=lr * ratio, betas=betas, eps=1e-8)


@dataclass
class TrainerState:
    config: TrainConfig
    generator: ConditionalGenerator
    discriminator: Discriminator
    g_opt: torch.optim.Optimizer
    d_opt: torch.optim.Optimizer
    ema_params: dict[str, torch.Tensor]
    pl_ema: torch.Tensor
    rng: torch.Generator
    iteration: int = 0
    extractor: object = None


def init_state(cfg: TrainConfig) -> TrainerState:
    torch.manual_seed(cfg.seed)
    generator, disc = build_models(cfg)
    g_opt = _lazy_adam(generator.parameters(), cfg.g_lr, cfg.loss.pathlen_every)
    d_opt = _lazy_adam(disc.parameters(), cfg.d_lr, cfg.loss.r1_every)
    ema = {k: v.detach().clone() for k, v in generator.state_dict().items()}
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    extractor = make_extractor(cfg.extractor_kind, cfg.extractor_seed, cfg.extractor_weights)
    return TrainerState(
        config=cfg,
        generator=generator,
        discriminator=disc,
        g_opt=g_opt,
        d_opt=d_opt,
        ema_params=ema,
        pl_ema=torch.zeros(()),
        rng=rng,
        extractor=extractor,
    )


def ema_generator(state: TrainerState) -> ConditionalGenerator:
    """Inference copy of the generator carrying the averaged weights."""
    gen, _ = build_models(state.config)
    gen.load_state_dict(state.ema_params)
    gen.eval()
    return gen


def _update_ema(state: TrainerState) -> None:
    decay = state.config.ema_decay
    with torch.no_grad():
        for name, value in state.generator.state_dict().items():
            ema = state.ema_params[name]
            if value.dtype.is_floating_point:
                ema.mul_(decay).add_(value, alpha=1.0 - decay)
            else:
                ema.copy_(value)


# ---------------------------------------------------------------------------
# steps and loop


def _disc_scores(disc: Discriminator, images: torch.Tensor) -> torch.Tensor:
    if images.shape[-1] == 2 * images.shape[-2]:
        images = split_nonsquare(images)
    return disc(images)


def train_step(state: TrainerState, batch, iteration: int) -> dict:
    """One alternating D/G update; returns the logged loss breakdown.

    Regularizer cadences use the 1-based iteration number: R1 (on reals) and
    path length run on iterations divisible by their intervals, each scaled
    by the interval.
    """
    cfg = state.config
    weights = cfg.loss
    cond, target = batch
    b = cond.shape[0]

    # discriminator step
    eps = torch.randn((b, cfg.latent_dim), generator=state.rng)
    with torch.no_grad():
        fake, _, _ = state.generator(cond, eps, noise_mode=cfg.noise_mode, generator=state.rng)
    d_parts = {"d_adv": d_adv_loss(_disc_scores(state.discriminator, target), _disc_scores(state.discriminator, fake))}
    if weights.r1_active(iteration):
        real_leaf = target.detach().requires_grad_(True)
        d_parts["r1"] = r1_penalty(real_leaf, lambda x: _disc_scores(state.discriminator, x), weights.r1_weight)
    d_total, d_applied = total_loss(d_parts, weights, iteration)
    state.d_opt.zero_grad(set_to_none=True)
    d_total.backward()
    state.d_opt.step()

    # generator step
    eps = torch.randn((b, cfg.latent_dim), generator=state.rng)
    fake, enc, w = state.generator(cond, eps, noise_mode=cfg.noise_mode, generator=state.rng)
    g_parts = {
        "g_adv": g_adv_loss(_disc_scores(state.discriminator, fake)),
        "kl": kl_loss(enc.mu, enc.logvar),
    }
    if weights.perceptual_active(iteration):
        g_parts["perceptual"] = perceptual_loss(fake, target, state.extractor)
    if weights.pathlen_active(iteration):
        penalty, state.pl_ema = path_length_penalty(
            w, fake, state.pl_ema, weights.pathlen_weight, weights.pathlen_decay, state.rng
        )
        g_parts["path_length"] = penalty
    g_total, g_applied = total_loss(g_parts, weights, iteration)
    state.g_opt.zero_grad(set_to_none=True)
    g_total.backward()
    state.g_opt.step()
    _update_ema(state)

    record = {
        "iteration": iteration,
        "d_total": float(d_total.detach()),
        "g_total": float(g_total.detach()),
        "applied_r1": weights.r1_active(iteration),
        "applied_path_length": weights.pathlen_active(iteration),
        "applied_perceptual": weights.perceptual_active(iteration),
        "lambda_kl": weights.lambda_kl,
        "lambda_perceptual": weights.lambda_perceptual,
    }
    for name, value in {**d_parts, **g_parts}.items():
        record[name] = float(value.detach())
    for name, value in {**d_applied, **g_applied}.items():
        record[f"weighted_{name}"] = float(value.detach())
    if not np.isfinite(record["d_total"]) or not np.isfinite(record["g_total"]):
        raise TrainingDiverged(f"non-finite loss at iteration {iteration}: {record}")
    state.iteration = iteration
    return record


def _eval_batch(state: TrainerState, corpus: Corpus, max_items: int = 16):
    cfg = state.config
    if cfg.role == "base":
        indices = list(range(min(len(corpus), max_items)))
        return make_base_batch(corpus, indices)
    role = cfg.class_role
    records = eligible_instances(corpus, role.class_id, role.model_res)
    indices = list(range(min(len(records), max_items)))
    return make_class_batch(
        corpus, role.class_id, role.model_res, role.removal_mode, indices,
        records=records, ablate_context=role.ablate_context,
    )


def evaluate(state: TrainerState, corpus: Corpus) -> dict:
    """Deterministic metrics with the averaged generator: perceptual distance
    to the targets and mean per-label-region color error (eps = 0, no noise)."""
    gen = ema_generator(state)
    cond, target = _eval_batch(state, corpus)
    with torch.no_grad():
        eps = torch.zeros((cond.shape[0], state.config.latent_dim))
        fake, _, _ = gen(cond, eps, noise_mode="none")
        perc = float(perceptual_loss(fake, target, state.extractor))

        color_errs = []
        if state.config.role == "base":
            num_classes = state.config.num_classes
            labels = cond[:, :num_classes].argmax(dim=1)
            for i in range(cond.shape[0]):
                for c in labels[i].unique():
                    region = labels[i] == c
                    diff = fake[i][:, region].mean(dim=1) - target[i][:, region].mean(dim=1)
                    color_errs.append(float(diff.abs().mean()))
        else:
            for i in range(cond.shape[0]):
                diff = fake[i].mean(dim=(1, 2)) - target[i].mean(dim=(1, 2))
                color_errs.append(float(diff.abs().mean()))
    return {"perceptual": perc, "color_error": float(np.mean(color_errs))}


def _sample_grid(state: TrainerState, corpus: Corpus, path: Path, max_items: int = 8) -> None:
    gen = ema_generator(state)
    cond, target = _eval_batch(state, corpus, max_items=max_items)
    with torch.no_grad():
        eps = torch.zeros((cond.shape[0], state.config.latent_dim))
        fake, _, _ = gen(cond, eps, noise_mode="none")
    fake = ((fake.clamp(-1, 1) + 1) / 2).numpy()
    real = ((target.clamp(-1, 1) + 1) / 2).numpy()
    rows = [np.concatenate(list(real.transpose(0, 2, 3, 1)), axis=1),
            np.concatenate(list(fake.transpose(0, 2, 3, 1)), axis=1)]
    grid = np.concatenate(rows, axis=0)
    Image.fromarray((grid * 255).astype(np.uint8)).save(path)


def train(
    cfg: TrainConfig,
    corpus: Corpus,
    run_dir: Path | None = None,
    state: TrainerState | None = None,
    log_every: int = 0,
) -> tuple[TrainerState, list[dict]]:
    """Run (or resume) training for cfg.total_iterations; returns the final
    state and the per-iteration history. Evaluation metrics and checkpoints
    are written under run_dir when given."""
    if state is None:
        state = init_state(cfg)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    history: list[dict] = []
    evals: list[dict] = []

    records = None
    if cfg.role == "class":
        role = cfg.class_role
        records = eligible_instances(corpus, role.class_id, role.model_res)
        if not records:
            raise ClassDataError(
                f"no instances of class {role.class_id} with tight box >= "
                f"{role.min_instance_size}x{role.min_instance_size} "
                f"(model_res {role.model_res})"
            )

    for iteration in range(state.iteration + 1, cfg.total_iterations + 1):
        if cfg.role == "base":
            idx = torch.randint(len(corpus), (cfg.batch_size,), generator=state.rng)
            batch = make_base_batch(corpus, idx.tolist())
        else:
            role = cfg.class_role
            idx = torch.randint(len(records), (cfg.batch_size,), generator=state.rng)
            batch = make_class_batch(
                corpus, role.class_id, role.model_res, role.removal_mode,
                idx.tolist(), records=records, ablate_context=role.ablate_context,
            )
        record = train_step(state, batch, iteration)
        history.append(record)
        if log_every and iteration % log_every == 0:
            print(
                f"iter {iteration}: d={record['d_total']:.4f} g={record['g_total']:.4f}",
                flush=True,
            )
        if cfg.eval_every and iteration % cfg.eval_every == 0:
            metrics = {"iteration": iteration, **evaluate(state, corpus)}
            evals.append(metrics)
        if run_dir is not None and cfg.checkpoint_every and iteration % cfg.checkpoint_every == 0:
            save_checkpoint(state, run_dir / f"ckpt_{iteration:06d}.bin")
            _sample_grid(state, corpus, run_dir / f"samples_{iteration:06d}.png")

    if run_dir is not None:
        save_checkpoint(state, run_dir / "ckpt_final.bin")
        (run_dir / "metrics.json").write_text(
            json.dumps({"history": history, "evals": evals}, indent=2) + "\n"
        )
    state.eval_history = evals
    return state, history


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(state: TrainerState, path: Path) -> None:
    """Versioned container: magic + version + JSON config header + torch blob."""
    payload = {
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "g_opt": state.g_opt.state_dict(),
        "d_opt": state.d_opt.state_dict(),
        "ema_params": state.ema_params,
        "pl_ema": state.pl_ema,
        "rng_state": state.rng.get_state(),
        "iteration": state.iteration,
    }
    header = json.dumps(
        {"config": state.config.to_dict(), "iteration": state.iteration}, sort_keys=True
    ).encode()
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(buf.getvalue())


def read_checkpoint_header(path: Path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version} "
                f"(expected {CHECKPOINT_VERSION})"
            )
        (hlen,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(hlen).decode())


def load_checkpoint(path: Path) -> TrainerState:
    header = read_checkpoint_header(path)
    with open(path, "rb") as f:
        f.read(4 + 4)
        (hlen,) = struct.unpack("<Q", f.read(8))
        f.read(hlen)
        payload = torch.load(f, map_location="cpu", weights_only=True)
    cfg = TrainConfig(**header["config"])
    state = init_state(cfg)
    state.generator.load_state_dict(payload["generator"])
    state.discriminator.load_state_dict(payload["discriminator"])
    state.g_opt.load_state_dict(payload["g_opt"])
    state.d_opt.load_state_dict(payload["d_opt"])
    state.ema_params = {k: v.clone() for k, v in payload["ema_params"].items()}
    state.pl_ema = payload["pl_ema"].clone()
    state.rng.set_state(payload["rng_state"])
    state.iteration = int(payload["iteration"])
    return state
