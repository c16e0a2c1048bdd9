"""Inference pipeline: generate the base image from the conditioning maps,
then sequentially generate class instances largest-first and alpha-blend each
onto the running canvas with dilated, softened masks."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import binary_dilation, distance_transform_edt, gaussian_filter

from .datamodel import (
    Box,
    EdgeMap,
    InstanceMap,
    InstanceRecord,
    SceneSample,
    SemanticMap,
    build_context,
    extract_instances,
    one_hot,
    resize_image,
)
from .generator import ConditionalGenerator
from .training import TrainConfig, context_condition, load_checkpoint, ema_generator


@dataclass
class BlendMask:
    """Soft alpha grid over the canvas, values in [0, 1]."""

    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float32)
        if self.alpha.ndim != 2:
            raise ValueError("alpha mask must be 2-D")
        if self.alpha.size and (self.alpha.min() < 0 or self.alpha.max() > 1):
            raise ValueError("alpha values must lie in [0, 1]")


@dataclass
class PlanStep:
    instance_id: int
    class_id: int
    area: int
    z_seed: int


@dataclass
class CompositionPlan:
    """Ordered blend schedule: non-increasing by area, ties by ascending id."""

    base_seed: int
    steps: list[PlanStep] = field(default_factory=list)

    def __post_init__(self):
        areas = [s.area for s in self.steps]
        if any(areas[i] < areas[i + 1] for i in range(len(areas) - 1)):
            raise ValueError("plan steps must be ordered largest-first")

    def to_json(self) -> str:
        return json.dumps(
            {
                "base_seed": self.base_seed,
                "steps": [vars(s) for s in self.steps],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "CompositionPlan":
        data = json.loads(text)
        return cls(data["base_seed"], [PlanStep(**s) for s in data["steps"]])


def plan_composition(
    records: list[InstanceRecord],
    class_whitelist,
    base_seed: int,
    instance_seed_offset: int = 1,
) -> CompositionPlan:
    chosen = [r for r in records if r.class_id in class_whitelist]
    ordered = sorted(chosen, key=lambda r: (-r.area, r.instance_id))
    steps = [
        PlanStep(r.instance_id, r.class_id, r.area, base_seed + instance_seed_offset + i)
        for i, r in enumerate(ordered)
    ]
    return CompositionPlan(base_seed, steps)


# ---------------------------------------------------------------------------
# model handles


@dataclass
class ModelHandle:
    """A trained generator ready for inference (averaged weights, eval mode)."""

    generator: ConditionalGenerator
    config: TrainConfig

    @classmethod
    def load(cls, path: Path) -> "ModelHandle":
        state = load_checkpoint(path)
        return cls(generator=ema_generator(state), config=state.config)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim


def _sample_eps(seed: int, dim: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn((1, dim), generator=gen)


# ---------------------------------------------------------------------------
# pipeline operations


def infer_base(
    semantic: SemanticMap, edges: EdgeMap, z_seed: int, base: ModelHandle
) -> np.ndarray:
    """Full-canvas base image in [0, 1] from cat(S_onehot, E)."""
    if base.config.role != "base":
        raise ValueError("checkpoint does not hold a base model")
    sem = one_hot(semantic.labels, semantic.num_classes)
    stack = np.concatenate([sem, edges.edges[..., None].astype(np.float32)], axis=2)
    cond = torch.from_numpy(np.ascontiguousarray(stack.transpose(2, 0, 1)))[None].float()
    eps = _sample_eps(z_seed, base.latent_dim)
    with torch.no_grad():
        img, _, _ = base.generator(cond, eps, noise_mode="none")
    out = ((img[0].clamp(-1, 1) + 1) / 2).numpy().transpose(1, 2, 0)
    return np.ascontiguousarray(out, dtype=np.float32)


def alpha_mask(instances: InstanceMap, target_id: int) -> BlendMask:
    """Binary mask: 1 where the instance map equals target_id, else 0."""
    if not (instances.ids == target_id).any():
        raise ValueError(f"instance id {target_id} not present")
    return BlendMask((instances.ids == target_id).astype(np.float32))


def relocate(instance_image: np.ndarray, tight_box: Box, canvas_dims: tuple[int, int]) -> np.ndarray:
    """Resize the square generated instance back to the tight box (undoing the
    square distortion) and paste it into a zero canvas."""
    h, w = canvas_dims
    if not (0 <= tight_box.x0 < tight_box.x1 <= w and 0 <= tight_box.y0 < tight_box.y1 <= h):
        raise ValueError("tight box must lie within the canvas")
    resized = resize_image(
        instance_image.astype(np.float32), tight_box.height, tight_box.width, "bilinear"
    )
    canvas = np.zeros((h, w) + instance_image.shape[2:], dtype=np.float32)
    canvas[tight_box.y0 : tight_box.y1, tight_box.x0 : tight_box.x1] = resized
    return canvas


def dilate_soften(
    mask: BlendMask,
    image: np.ndarray,
    radius: int = 2,
    sigma: float = 1.0,
) -> tuple[BlendMask, np.ndarray]:
    """Grow and feather a binary blend mask; extend the instance image over
    the dilation band by nearest-foreground fill.

    The softened alpha keeps the original mask at 1, is zero outside the
    dilated support, and never shrinks below the input mask.
    """
    hard = mask.alpha > 0.5
    if radius == 0 and sigma == 0:
        return BlendMask(hard.astype(np.float32)), image.copy()
    if radius > 0:
        dilated = binary_dilation(hard, iterations=radius)
    else:
        dilated = hard
    if sigma > 0:
        soft = gaussian_filter(dilated.astype(np.float64), sigma=sigma, mode="constant")
        soft = np.clip(soft, 0.0, 1.0)
    else:
        soft = dilated.astype(np.float64)
    # feather only inside the dilation band: outside stays exactly zero and
    # original-mask pixels stay exactly one
    soft = np.where(dilated, soft, 0.0)
    soft = np.maximum(soft, hard.astype(np.float64))

    out_image = image.copy()
    band = dilated & ~hard
    if band.any() and hard.any():
        _, nearest = distance_transform_edt(~hard, return_indices=True)
        ys, xs = np.nonzero(band)
        out_image[ys, xs] = image[nearest[0][ys, xs], nearest[1][ys, xs]]
    return BlendMask(soft.astype(np.float32)), out_image


def composite(base_image: np.ndarray, instance_image: np.ndarray, mask: BlendMask) -> np.ndarray:
    """Per-pixel alpha blend: alpha * instance + (1 - alpha) * base."""
    if base_image.shape != instance_image.shape:
        raise ValueError("base and instance images must share shapes")
    if mask.alpha.shape != base_image.shape[:2]:
        raise ValueError("mask must match the canvas dims")
    a = mask.alpha[..., None] if base_image.ndim == 3 else mask.alpha
    return a * instance_image + (1.0 - a) * base_image


def generate_instance(
    current_canvas: np.ndarray,
    scene_semantic: SemanticMap,
    rec: InstanceRecord,
    model: ModelHandle,
    z_seed: int,
) -> np.ndarray:
    """Render one instance (square, model resolution, [0, 1]) conditioned on
    the running canvas around its enlarged box."""
    if model.config.role != "class":
        raise ValueError("checkpoint does not hold a class model")
    role = model.config.class_role
    if rec.class_id != role.class_id:
        raise ValueError(f"model trained for class {role.class_id}, got {rec.class_id}")
    scene = SceneSample(
        image=np.clip(current_canvas, 0.0, 1.0),
        semantic=scene_semantic,
        instances=InstanceMap(np.zeros(current_canvas.shape[:2], dtype=np.int32)),
        edges=EdgeMap(np.zeros(current_canvas.shape[:2], dtype=np.uint8)),
    )
    ctx = build_context(scene, rec, role.removal_mode, role.context_res)
    stacked = ctx.stacked()
    if role.ablate_context:
        stacked = stacked.copy()
        stacked[..., :3] = 0.0
    cond = torch.from_numpy(context_condition(stacked))[None]
    eps = _sample_eps(z_seed, model.latent_dim)
    with torch.no_grad():
        img, _, _ = model.generator(cond, eps, noise_mode="none")
    out = ((img[0].clamp(-1, 1) + 1) / 2).numpy().transpose(1, 2, 0)
    return np.ascontiguousarray(out, dtype=np.float32)


def _scale_record(rec: InstanceRecord, factor: int) -> InstanceRecord:
    if factor == 1:
        return rec
    box = Box(rec.tight_box.x0 * factor, rec.tight_box.y0 * factor,
              rec.tight_box.x1 * factor, rec.tight_box.y1 * factor)
    mask = resize_image(rec.mask.astype(np.uint8), box.height, box.width, "nearest").astype(bool)
    return InstanceRecord(
        instance_id=rec.instance_id,
        class_id=rec.class_id,
        tight_box=box,
        mask=mask,
        area=int(mask.sum()),
    )


def run_pipeline(
    semantic: SemanticMap,
    instances: InstanceMap,
    edges: EdgeMap,
    base: ModelHandle,
    class_models: dict[int, ModelHandle],
    seed: int,
    class_whitelist=None,
    dilate_radius: int = 2,
    soften_sigma: float = 1.0,
    upscale_factor: int = 1,
    base_image: np.ndarray | None = None,
    plan: CompositionPlan | None = None,
) -> dict:
    """Full inference: base image, then largest-first instance passes.

    Each pass renders an instance from the current canvas's context, resizes
    and relocates it, dilates and softens its mask, and alpha-blends it in;
    the result becomes the canvas for the next instance. Instances whose
    class has no trained model are skipped. Returns the composite, the base
    image, the executed plan, and the per-instance crops.
    """
    if upscale_factor < 1:
        raise ValueError("upscale_factor must be >= 1")
    if base_image is None:
        base_image = infer_base(semantic, edges, seed, base)
    canvas = base_image
    sem_labels = semantic.labels
    inst_ids = instances.ids
    if upscale_factor > 1:
        h, w = base_image.shape[:2]
        canvas = resize_image(base_image, h * upscale_factor, w * upscale_factor, "bilinear")
        sem_labels = resize_image(sem_labels, h * upscale_factor, w * upscale_factor, "nearest")
        inst_ids = resize_image(inst_ids, h * upscale_factor, w * upscale_factor, "nearest")
    sem_scaled = SemanticMap(sem_labels, semantic.num_classes)

    records = {r.instance_id: r for r in extract_instances(instances, semantic)}
    if plan is None:
        whitelist = set(class_models) if class_whitelist is None else set(class_whitelist)
        plan = plan_composition(list(records.values()), whitelist, seed)

    skipped = []
    crops = {}
    for step in plan.steps:
        model = class_models.get(step.class_id)
        if model is None:
            skipped.append(step.instance_id)
            continue
        rec = _scale_record(records[step.instance_id], upscale_factor)
        inst_img = generate_instance(canvas, sem_scaled, rec, model, step.z_seed)
        crops[step.instance_id] = inst_img
        relocated = relocate(inst_img, rec.tight_box, canvas.shape[:2])
        mask = BlendMask((inst_ids == step.instance_id).astype(np.float32))
        soft_mask, extended = dilate_soften(mask, relocated, dilate_radius, soften_sigma)
        canvas = composite(canvas, extended, soft_mask)
    return {
        "composite": canvas,
        "base_image": base_image,
        "plan": plan,
        "instance_crops": crops,
        "skipped": skipped,
    }


def mixed_resolution_composite(
    semantic: SemanticMap,
    instances: InstanceMap,
    edges: EdgeMap,
    base: ModelHandle,
    class_models: dict[int, ModelHandle],
    seed: int,
    upscale_factor: int,
    class_whitelist=None,
    dilate_radius: int = 2,
    soften_sigma: float = 1.0,
) -> dict:
    """Upsample the base image, then run the instance passes in upscaled
    coordinates so each instance is rendered at its model's native
    resolution."""
    return run_pipeline(
        semantic, instances, edges, base, class_models, seed,
        class_whitelist=class_whitelist, dilate_radius=dilate_radius,
        soften_sigma=soften_sigma, upscale_factor=upscale_factor,
    )


def replace_in_real(
    real_scene: SceneSample,
    rec: InstanceRecord,
    model: ModelHandle,
    z_seed: int,
    dilate_radius: int = 2,
    soften_sigma: float = 1.0,
) -> np.ndarray:
    """Regenerate one instance of a real scene in place; every pixel outside
    the dilated instance mask is returned bit-identical to the input."""
    inst_img = generate_instance(real_scene.image, real_scene.semantic, rec, model, z_seed)
    relocated = relocate(inst_img, rec.tight_box, real_scene.shape)
    mask = alpha_mask(real_scene.instances, rec.instance_id)
    soft_mask, extended = dilate_soften(mask, relocated, dilate_radius, soften_sigma)
    return composite(real_scene.image.astype(np.float32), extended, soft_mask)
