"""YAML run configuration: one file with sections per subsystem, resolved to
the dataclasses the modules consume. CLI flags override file values; the
resolved snapshot is persisted next to every run's outputs."""
from __future__ import annotations

import os
from pathlib import Path

import yaml

from .losses import LossWeights
from .synthetic import SceneGrammar
from .training import ClassRole, TrainConfig

RUN_ROOT_ENV = "SCENESYNTH_RUN_ROOT"

DEFAULT_CONFIG: dict = {
    "run_root": "runs",
    "dataset": {
        "out_dir": "data/toy",
        "seed": 7,
        "num_scenes": 64,
        "grammar": {
            "canvas_size": 64,
            "shape_kinds": ["rectangle", "ellipse", "triangle"],
            "shapes_per_scene": [1, 3],
            "size_range": [0.25, 0.55],
            "context_coupling": False,
        },
    },
    "training": {
        "role": "base",
        "resolution": 64,
        "batch_size": 8,
        "total_iterations": 2000,
        "seed": 1234,
        "latent_dim": 64,
        "style_dim": 64,
        "mapping_depth": 2,
        "max_channels": 128,
        "eval_every": 100,
        "checkpoint_every": 500,
    },
    "losses": {},
    "class_models": {},
    "composition": {"dilate_radius": 2, "soften_sigma": 1.0},
}


def _merged(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merged(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: Path | None) -> dict:
    """Defaults merged with the YAML file (when given)."""
    cfg = DEFAULT_CONFIG
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: config root must be a mapping")
        cfg = _merged(cfg, loaded)
    return cfg


def save_config(cfg: dict, path: Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True))


def run_root(cfg: dict) -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, cfg.get("run_root", "runs")))


def grammar_from_config(cfg: dict) -> SceneGrammar:
    g = cfg["dataset"]["grammar"]
    return SceneGrammar(
        canvas_size=g.get("canvas_size", 64),
        shape_kinds=tuple(g.get("shape_kinds", ["rectangle", "ellipse", "triangle"])),
        shapes_per_scene=tuple(g.get("shapes_per_scene", [1, 3])),
        size_range=tuple(g.get("size_range", [0.25, 0.55])),
        context_coupling=bool(g.get("context_coupling", False)),
    )


def train_config_from_config(cfg: dict, role: str, num_classes: int) -> TrainConfig:
    """Build the trainer settings for 'base' or 'class:<id>'."""
    t = dict(cfg["training"])
    t.pop("role", None)
    loss = LossWeights(**cfg.get("losses", {}))
    if role == "base":
        return TrainConfig(role="base", num_classes=num_classes, loss=loss, **t)
    if not role.startswith("class:"):
        raise ValueError(f"role must be 'base' or 'class:<id>', got {role!r}")
    class_id = int(role.split(":", 1)[1])
    per_class = cfg.get("class_models", {})
    settings = per_class.get(str(class_id), per_class.get(class_id, {}))
    class_role = ClassRole(
        class_id=class_id,
        model_res=int(settings.get("model_res", 128)),
        removal_mode=settings.get("removal_mode", "blur"),
        ablate_context=bool(settings.get("ablate_context", False)),
    )
    return TrainConfig(role="class", class_role=class_role, num_classes=num_classes, loss=loss, **t)
